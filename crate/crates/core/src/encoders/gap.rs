use crate::error::{Error, Result};
use crate::tensor::Tensor;

const ORTHO_TOL: f64 = 1e-6;
const RESIDUAL_FLOOR: f64 = 1e-10;

/// Split of a unit vector into its in-span and orthogonal directions.
#[derive(Debug, Clone)]
pub struct GapDecomposition {
    /// Unit direction of the projection onto the basis span.
    pub z_x: Vec<f64>,
    /// Unit direction of the residual, or zeros when the residual vanishes.
    pub z_perp: Vec<f64>,
    /// Squared norm of the projection.
    pub a: f64,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Decompose unit `z` as `√a·z_x + √(1−a)·z_perp` against an orthonormal basis `[r × d]`.
pub fn modality_gap_decompose(z: &[f64], basis: &Tensor<f64>) -> Result<GapDecomposition> {
    if basis.rank() != 2 || basis.shape()[1] != z.len() {
        return Err(Error::Shape(format!(
            "basis {:?} does not match vector of length {}",
            basis.shape(),
            z.len()
        )));
    }
    let zn = norm(z);
    if (zn - 1.0).abs() > 1e-6 {
        return Err(Error::Contract(format!("z must be unit norm, got {zn}")));
    }
    let r = basis.shape()[0];
    for i in 0..r {
        for j in i..r {
            let want = if i == j { 1.0 } else { 0.0 };
            let got = dot(basis.row(i), basis.row(j));
            if (got - want).abs() > ORTHO_TOL {
                return Err(Error::Contract(format!(
                    "basis rows {i},{j} not orthonormal (inner product {got})"
                )));
            }
        }
    }
    let mut proj = vec![0.0; z.len()];
    for i in 0..r {
        let row = basis.row(i);
        let c = dot(z, row);
        for (p, &b) in proj.iter_mut().zip(row) {
            *p += c * b;
        }
    }
    let mut resid: Vec<f64> = z.iter().zip(&proj).map(|(a, b)| a - b).collect();
    let pn = norm(&proj);
    let rn = norm(&resid);
    let a = (pn * pn).clamp(0.0, 1.0);
    let z_x = if pn > RESIDUAL_FLOOR {
        proj.iter().map(|x| x / pn).collect()
    } else {
        vec![0.0; z.len()]
    };
    if rn > RESIDUAL_FLOOR {
        for x in &mut resid {
            *x /= rn;
        }
    } else {
        resid.iter_mut().for_each(|x| *x = 0.0);
    }
    Ok(GapDecomposition { z_x, z_perp: resid, a })
}

/// Orthonormalize the rows of `m` (modified Gram-Schmidt), dropping dependent rows.
pub fn orthonormal_rows(m: &Tensor<f64>) -> Tensor<f64> {
    let d = m.last_dim();
    let mut out: Vec<Vec<f64>> = Vec::new();
    for i in 0..m.rows() {
        let mut v = m.row(i).to_vec();
        for _ in 0..2 {
            for q in &out {
                let c = dot(&v, q);
                for (x, y) in v.iter_mut().zip(q) {
                    *x -= c * y;
                }
            }
        }
        let n = norm(&v);
        if n > 1e-9 {
            v.iter_mut().for_each(|x| *x /= n);
            out.push(v);
        }
    }
    let r = out.len();
    Tensor::new(vec![r, d], out.concat()).expect("non-empty basis")
}
