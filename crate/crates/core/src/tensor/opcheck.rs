//! Finite-difference sweep over every differentiable tensor op.

use super::gradcheck::{check_gradients, GradCheckReport};
use super::{Graph, Tensor, Var};
use crate::error::Result;
use crate::rng;

type OpFn = for<'g> fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>>;

fn readout<'g>(y: Var<'g, f64>) -> Result<Var<'g, f64>> {
    let w = y.graph().constant(rng::gaussian_tensor(17, "opcheck.readout", &y.shape(), 1.0));
    y.mul(w)?.sum()
}

fn cases() -> Vec<(&'static str, Vec<(&'static str, Vec<usize>)>, OpFn)> {
    vec![
        ("matmul", vec![("a", vec![3, 4]), ("b", vec![4, 2])], |_, v| readout(v[0].matmul(v[1])?)),
        ("transpose", vec![("x", vec![3, 2])], |_, v| readout(v[0].transpose()?)),
        ("linear", vec![("x", vec![3, 4]), ("w", vec![4, 2]), ("b", vec![2])], |_, v| readout(v[0].linear(v[1], Some(v[2]))?)),
        ("add", vec![("a", vec![2, 3]), ("b", vec![3])], |_, v| readout(v[0].add(v[1])?)),
        ("sub", vec![("a", vec![2, 3]), ("b", vec![2, 3])], |_, v| readout(v[0].sub(v[1])?)),
        ("mul", vec![("a", vec![2, 3]), ("b", vec![2, 3])], |_, v| readout(v[0].mul(v[1])?)),
        ("scale_by", vec![("x", vec![2, 3]), ("s", vec![1])], |_, v| readout(v[0].scale_by(v[1])?)),
        ("exp", vec![("x", vec![2, 3])], |_, v| readout(v[0].scale(0.5).exp())),
        ("log", vec![("x", vec![2, 3])], |_, v| readout(v[0].exp().add_scalar(0.5).log()?)),
        ("gelu", vec![("x", vec![2, 5])], |_, v| readout(v[0].gelu()?)),
        ("softmax", vec![("x", vec![2, 3, 4])], |_, v| readout(v[0].softmax(1)?)),
        ("layer_norm", vec![("x", vec![3, 5]), ("g", vec![5]), ("b", vec![5])], |_, v| {
            readout(v[0].layer_norm(v[1], v[2], 1e-5)?)
        }),
        ("l2_normalize", vec![("x", vec![3, 4])], |_, v| readout(v[0].l2_normalize()?)),
        ("concat", vec![("a", vec![2, 3]), ("b", vec![2, 2])], |_, v| {
            let c = Var::concat_cols(&[v[0], v[1]])?;
            readout(Var::concat_rows(&[c, c.scale(2.0)])?)
        }),
        ("gather_rows", vec![("x", vec![3, 2])], |_, v| readout(v[0].gather_rows(&[2, 0, 2, 1])?)),
        ("mean", vec![("x", vec![3, 2])], |_, v| v[0].mul(v[0])?.mean()),
        ("cross_entropy", vec![("z", vec![3, 4])], |_, v| v[0].cross_entropy(&[1, 3, 0])),
        ("kl_divergence", vec![("p", vec![3, 4]), ("q", vec![3, 4])], |_, v| {
            Var::kl_divergence(v[0].softmax_last()?, v[1].softmax_last()?)
        }),
        ("attention", vec![("q", vec![4, 8]), ("k", vec![6, 8]), ("v", vec![6, 8])], |_, v| {
            let p = v[0].attention_scores(v[1], 4, 2)?;
            readout(p.attention_mix(v[2])?)?.add(readout(p.head_mean()?)?)
        }),
    ]
}

/// Check every op with inputs drawn from `seed`; report names are `op/input`.
pub fn op_suite(seed: u64, step: f64) -> Result<Vec<GradCheckReport>> {
    let mut out = Vec::new();
    for (op, shapes, f) in cases() {
        let inputs: Vec<(String, Tensor<f64>)> = shapes
            .iter()
            .map(|(n, s)| (n.to_string(), rng::gaussian_tensor(seed, &format!("opcheck.{op}.{n}"), s, 1.0)))
            .collect();
        for mut r in check_gradients(&inputs, step, f)? {
            r.name = format!("{op}/{}", r.name);
            out.push(r);
        }
    }
    Ok(out)
}
