//! Textual prototypes, visual proxies, decouplers and training losses.

mod decouple;
mod gradcheck;
mod params;

use crate::config::{Config, KlBranches};
use crate::data::{CompositionSpace, Pair, World};
use crate::encoders::{BoundTextEncoder, FrozenImageEncoder, FrozenTextEncoder, TextEncoderConfig, FIRST_FREE_TOKEN, PREFIX_TOKENS};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Element, Graph, Tensor, Var};

pub use decouple::{cross_modal_decouple, decouple, init_decoupler, mlp_decouple};
pub use gradcheck::{gradcheck_model, GradCheckSetup};
pub use params::{BoundParams, ParamStore};

/// Number of learnable prefix tokens per prompt.
pub const PREFIX_LEN: usize = PREFIX_TOKENS.len();

pub const DECOUPLERS: [&str; 4] = ["i2t.attr", "i2t.obj", "i2v.attr", "i2v.obj"];

/// Which probability paths a forward pass builds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Paths {
    pub text: bool,
    pub visual: bool,
}

impl Paths {
    pub fn from_config(cfg: &Config) -> Self {
        Paths {
            text: !cfg.no_tp,
            visual: !cfg.no_vp,
        }
    }
}

/// Per-branch logits of one path.
#[derive(Clone, Copy)]
pub struct BranchLogits<'g, T> {
    pub a: Var<'g, T>,
    pub o: Var<'g, T>,
    pub c: Var<'g, T>,
}

impl<'g, T: Element> BranchLogits<'g, T> {
    pub fn probs(&self) -> Result<BranchProbs<T>> {
        Ok(BranchProbs {
            a: (*self.a.softmax_last()?.value()).clone(),
            o: (*self.o.softmax_last()?.value()).clone(),
            c: (*self.c.softmax_last()?.value()).clone(),
        })
    }
}

/// Per-branch probability rows.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchProbs<T: Element> {
    pub a: Tensor<T>,
    pub o: Tensor<T>,
    pub c: Tensor<T>,
}

/// Textual prototypes or normalized visual proxies for one class set.
#[derive(Clone, Copy)]
pub struct ClassEmbeddings<'g, T> {
    pub a: Var<'g, T>,
    pub o: Var<'g, T>,
    pub c: Var<'g, T>,
}

pub struct TextPath<'g, T> {
    pub prototypes: ClassEmbeddings<'g, T>,
    /// Normalized decoupled features.
    pub f_a: Var<'g, T>,
    pub f_o: Var<'g, T>,
    pub s_a: Option<Var<'g, T>>,
    pub s_o: Option<Var<'g, T>>,
    pub logits: BranchLogits<'g, T>,
}

pub struct VisualPath<'g, T> {
    pub proxies: ClassEmbeddings<'g, T>,
    pub f_a: Var<'g, T>,
    pub f_o: Var<'g, T>,
    pub inv_tau: Var<'g, T>,
    pub logits: BranchLogits<'g, T>,
}

pub struct Forward<'g, T> {
    /// Normalized global image feature `[B × d]`.
    pub f: Var<'g, T>,
    pub text: Option<TextPath<'g, T>>,
    pub visual: Option<VisualPath<'g, T>>,
}

/// Class indices for each branch of a labelled batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Targets {
    pub attr: Vec<usize>,
    pub obj: Vec<usize>,
    /// Index into the composition class list used for the forward pass.
    pub comp: Vec<usize>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub t_a: f64,
    pub t_o: f64,
    pub t_c: f64,
    pub v_a: f64,
    pub v_o: f64,
    pub v_c: f64,
    pub kl: f64,
}

impl LossBreakdown {
    /// Recombine the parts with the configured weights.
    pub fn reassemble(&self, cfg: &Config) -> f64 {
        let lt = cfg.gamma_ao * (self.t_a + self.t_o) + cfg.gamma_c * self.t_c;
        let lv = cfg.gamma_ao * (self.v_a + self.v_o) + cfg.gamma_c * self.v_c;
        cfg.alpha * (lt + lv) + cfg.beta * self.kl
    }
}

fn scalar<T: Element>(v: Var<'_, T>) -> f64 {
    v.value().item().as_f64()
}

fn weighted_path<'g, T: Element>(cfg: &Config, l: BranchLogits<'g, T>, t: &Targets) -> Result<(Var<'g, T>, [f64; 3])> {
    let la = l.a.cross_entropy(&t.attr)?;
    let lo = l.o.cross_entropy(&t.obj)?;
    let lc = l.c.cross_entropy(&t.comp)?;
    let total = la.add(lo)?.scale(T::lit(cfg.gamma_ao)).add(lc.scale(T::lit(cfg.gamma_c)))?;
    Ok((total, [scalar(la), scalar(lo), scalar(lc)]))
}

/// Combine per-branch cross-entropies and the KL coupling term.
///
/// A missing path contributes nothing; the KL term needs both.
pub fn combine_losses<'g, T: Element>(
    cfg: &Config,
    text: Option<BranchLogits<'g, T>>,
    visual: Option<BranchLogits<'g, T>>,
    targets: &Targets,
) -> Result<(Var<'g, T>, LossBreakdown)> {
    let mut out = LossBreakdown::default();
    let mut sum: Option<Var<'g, T>> = None;
    if let Some(l) = text {
        let (lt, [a, o, c]) = weighted_path(cfg, l, targets)?;
        (out.t_a, out.t_o, out.t_c) = (a, o, c);
        sum = Some(lt);
    }
    if let Some(l) = visual {
        let (lv, [a, o, c]) = weighted_path(cfg, l, targets)?;
        (out.v_a, out.v_o, out.v_c) = (a, o, c);
        sum = Some(match sum {
            Some(s) => s.add(lv)?,
            None => lv,
        });
    }
    let mut loss = sum
        .ok_or_else(|| Error::Config("both probability paths disabled".into()))?
        .scale(T::lit(cfg.alpha));
    if let (Some(t), Some(v)) = (text, visual) {
        let pairs: &[(Var<'g, T>, Var<'g, T>)] = match cfg.kl_branches {
            KlBranches::C => &[(t.c, v.c)],
            KlBranches::Aoc => &[(t.a, v.a), (t.o, v.o), (t.c, v.c)],
        };
        let mut kl: Option<Var<'g, T>> = None;
        for &(lt, lv) in pairs {
            let mut pt = lt.softmax_last()?;
            if cfg.kl_detach_target {
                pt = pt.detach();
            }
            let term = Var::kl_divergence(pt, lv.softmax_last()?)?;
            kl = Some(match kl {
                Some(k) => k.add(term)?,
                None => term,
            });
        }
        let kl = kl.expect("at least one branch");
        out.kl = scalar(kl);
        loss = loss.add(kl.scale(T::lit(cfg.beta)))?;
    }
    out.total = scalar(loss);
    Ok((loss, out))
}

/// Model parameters plus the frozen encoders they are read through.
pub struct Model<T: Element> {
    cfg: Config,
    space: CompositionSpace,
    d: usize,
    text: FrozenTextEncoder<T>,
    image: FrozenImageEncoder<T>,
    params: ParamStore<T>,
}

impl<T: Element> Model<T> {
    pub fn new(cfg: &Config, space: &CompositionSpace, d: usize, raw_dim: usize) -> Result<Self> {
        cfg.validate()?;
        if cfg.heads == 0 || !d.is_multiple_of(cfg.heads) {
            return Err(Error::Config(format!("heads {} must divide d = {d}", cfg.heads)));
        }
        let needed = FIRST_FREE_TOKEN + space.n_attrs() + space.n_objs();
        if needed > cfg.vocab_size {
            return Err(Error::Config(format!(
                "vocab_size {} too small for {} primitives",
                cfg.vocab_size,
                space.n_attrs() + space.n_objs()
            )));
        }
        let text = FrozenTextEncoder::new(TextEncoderConfig {
            vocab_size: cfg.vocab_size,
            d_tok: cfg.d_tok,
            d,
            heads: cfg.text_heads,
            blocks: cfg.text_blocks,
            ffn_ratio: 4,
            seed: cfg.encoder_seed,
        })?;
        let image = FrozenImageEncoder::new(raw_dim, d, cfg.encoder_seed);
        let mut model = Model {
            cfg: cfg.clone(),
            space: space.clone(),
            d,
            text,
            image,
            params: ParamStore::default(),
        };
        model.params = model.init_params()?;
        Ok(model)
    }

    pub fn for_world(cfg: &Config, world: &World) -> Result<Self> {
        Model::new(cfg, &world.space, world.config.d, world.raw_dim())
    }

    fn init_params(&self) -> Result<ParamStore<T>> {
        let (na, no, d) = (self.space.n_attrs(), self.space.n_objs(), self.d);
        let mut s = ParamStore::default();
        let prefix = self.text.token_embeddings(&PREFIX_TOKENS)?;
        for branch in ["a", "o", "c"] {
            s.insert(format!("prompt.prefix_{branch}"), prefix.clone());
        }
        let attr_ids: Vec<usize> = (0..na).map(|i| self.attr_token(i)).collect();
        let obj_ids: Vec<usize> = (0..no).map(|j| self.obj_token(j)).collect();
        let attr_tok = self.text.token_embeddings(&attr_ids)?;
        let obj_tok = self.text.token_embeddings(&obj_ids)?;
        s.insert("prompt.attr_tokens", attr_tok.clone());
        s.insert("prompt.obj_tokens", obj_tok.clone());

        let kinds = [self.cfg.i2t, self.cfg.i2t, self.cfg.i2v, self.cfg.i2v];
        for (prefix, kind) in DECOUPLERS.iter().zip(kinds) {
            init_decoupler(&mut s, prefix, kind, d, self.cfg.seed);
        }

        s.insert("proxy.attr", self.single_token_embeddings(&attr_tok)?);
        s.insert("proxy.obj", self.single_token_embeddings(&obj_tok)?);
        let mut w = Tensor::zeros(&[2 * d, d]);
        for k in 0..d {
            w.data_mut()[k * d + k] = T::lit(0.5);
            w.data_mut()[(d + k) * d + k] = T::lit(0.5);
        }
        let noise: Tensor<T> = rng::gaussian_tensor(self.cfg.seed, "proxy.comp.w", &[2 * d, d], self.cfg.proxy_noise);
        for (x, &e) in w.data_mut().iter_mut().zip(noise.data()) {
            *x += e;
        }
        s.insert("proxy.comp.w", w);
        s.insert("proxy.comp.b", Tensor::zeros(&[d]));
        s.insert("log_tau_v", Tensor::new(vec![1], vec![T::lit(self.cfg.tau_v.ln())])?);
        Ok(s)
    }

    /// Normalized encodings of single-token sequences, one per row of `tokens`.
    fn single_token_embeddings(&self, tokens: &Tensor<T>) -> Result<Tensor<T>> {
        let g = Graph::new();
        let out = self.text.bind(&g).encode(g.constant(tokens.clone()), 1)?.l2_normalize()?;
        Ok((*out.value()).clone())
    }

    pub fn attr_token(&self, i: usize) -> usize {
        FIRST_FREE_TOKEN + i
    }

    pub fn obj_token(&self, j: usize) -> usize {
        FIRST_FREE_TOKEN + self.space.n_attrs() + j
    }

    pub fn config(&self) -> &Config {
        &self.cfg
    }

    /// Change settings that do not affect parameter layout.
    pub fn config_mut(&mut self) -> &mut Config {
        &mut self.cfg
    }

    pub fn space(&self) -> &CompositionSpace {
        &self.space
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn text_encoder(&self) -> &FrozenTextEncoder<T> {
        &self.text
    }

    pub fn image_encoder(&self) -> &FrozenImageEncoder<T> {
        &self.image
    }

    /// Digest of both frozen encoders.
    pub fn frozen_fingerprint(&self) -> u64 {
        self.text.fingerprint().rotate_left(1) ^ self.image.fingerprint()
    }

    pub fn inv_tau_t(&self) -> T {
        T::lit(1.0 / self.cfg.tau_t)
    }

    fn check_pairs(&self, pairs: &[Pair]) -> Result<()> {
        if pairs.is_empty() {
            return Err(Error::Contract("empty composition class list".into()));
        }
        match pairs.iter().find(|p| !self.space.contains(**p)) {
            Some(p) => Err(Error::Index(format!("pair {p} outside the composition space"))),
            None => Ok(()),
        }
    }

    /// Stack `[prefix, tokens...]` sequences selected by `rows` from `bank`.
    fn prompts<'g>(&self, bank: Var<'g, T>, rows: impl Iterator<Item = Vec<usize>>) -> Result<(Var<'g, T>, usize)> {
        let mut idx = Vec::new();
        let mut len = 0;
        for tail in rows {
            idx.extend(0..PREFIX_LEN);
            len = PREFIX_LEN + tail.len();
            idx.extend(tail.into_iter().map(|r| PREFIX_LEN + r));
        }
        Ok((bank.gather_rows(&idx)?, len))
    }

    /// Normalized text prototypes for all primitives and for `pairs`.
    pub fn textual_prototypes<'g>(
        &self,
        te: &BoundTextEncoder<'g, '_, T>,
        p: &BoundParams<'g, '_, T>,
        pairs: &[Pair],
    ) -> Result<ClassEmbeddings<'g, T>> {
        self.check_pairs(pairs)?;
        let (na, no) = (self.space.n_attrs(), self.space.n_objs());
        let attr = p.var("prompt.attr_tokens");
        let obj = p.var("prompt.obj_tokens");
        let enc = |bank: Var<'g, T>, rows: Vec<Vec<usize>>| -> Result<Var<'g, T>> {
            let (seq, len) = self.prompts(bank, rows.into_iter())?;
            te.encode(seq, len)?.l2_normalize()
        };
        let a_bank = Var::concat_rows(&[p.var("prompt.prefix_a"), attr])?;
        let o_bank = Var::concat_rows(&[p.var("prompt.prefix_o"), obj])?;
        let c_bank = Var::concat_rows(&[p.var("prompt.prefix_c"), attr, obj])?;
        Ok(ClassEmbeddings {
            a: enc(a_bank, (0..na).map(|i| vec![i]).collect())?,
            o: enc(o_bank, (0..no).map(|j| vec![j]).collect())?,
            c: enc(c_bank, pairs.iter().map(|q| vec![q.0, na + q.1]).collect())?,
        })
    }

    /// Normalized visual proxies; composition proxies come from the projector.
    pub fn visual_proxies<'g>(&self, p: &BoundParams<'g, '_, T>, pairs: &[Pair]) -> Result<ClassEmbeddings<'g, T>> {
        self.check_pairs(pairs)?;
        let va = p.var("proxy.attr");
        let vo = p.var("proxy.obj");
        let ai: Vec<usize> = pairs.iter().map(|q| q.0).collect();
        let oi: Vec<usize> = pairs.iter().map(|q| q.1).collect();
        let cat = Var::concat_cols(&[va.gather_rows(&ai)?, vo.gather_rows(&oi)?])?;
        let vc = cat.linear(p.var("proxy.comp.w"), Some(p.var("proxy.comp.b")))?.l2_normalize()?;
        Ok(ClassEmbeddings {
            a: va.l2_normalize()?,
            o: vo.l2_normalize()?,
            c: vc,
        })
    }

    /// Composition proxy for any pair of the full product space.
    pub fn compose_proxy(&self, pair: Pair) -> Result<Tensor<T>> {
        if !self.space.contains(pair) {
            return Err(Error::Index(format!("pair {pair} outside the composition space")));
        }
        let g = Graph::new();
        let p = self.params.bind_frozen(&g);
        let c = self.visual_proxies(&p, &[pair])?.c;
        (*c.value()).clone().reshape(&[self.d])
    }

    /// Normalized global image features of a raw batch.
    pub fn image_features<'g>(&self, g: &'g Graph<T>, raw: &Tensor<T>) -> Result<Var<'g, T>> {
        self.image.encode(g, g.constant(raw.clone()))?.l2_normalize()
    }

    pub fn forward<'g>(
        &self,
        g: &'g Graph<T>,
        p: &BoundParams<'g, '_, T>,
        raw: &Tensor<T>,
        pairs: &[Pair],
        paths: Paths,
    ) -> Result<Forward<'g, T>> {
        let f = self.image_features(g, raw)?;
        let heads = self.cfg.heads;
        let text = if paths.text {
            let te = self.text.bind(g);
            let t = self.textual_prototypes(&te, p, pairs)?;
            let (fa, s_a) = decouple(p, "i2t.attr", self.cfg.i2t, f, t.a, heads)?;
            let (fo, s_o) = decouple(p, "i2t.obj", self.cfg.i2t, f, t.o, heads)?;
            let (fa, fo) = (fa.l2_normalize()?, fo.l2_normalize()?);
            let inv = self.inv_tau_t();
            let branch = |feat: Var<'g, T>, protos: Var<'g, T>, s: Option<Var<'g, T>>| -> Result<Var<'g, T>> {
                let sim = feat.matmul(protos.transpose()?)?;
                let sim = match s {
                    Some(s) => sim.add(s)?,
                    None => sim,
                };
                Ok(sim.scale(inv))
            };
            let logits = BranchLogits {
                a: branch(fa, t.a, s_a)?,
                o: branch(fo, t.o, s_o)?,
                c: branch(f, t.c, None)?,
            };
            Some(TextPath {
                prototypes: t,
                f_a: fa,
                f_o: fo,
                s_a,
                s_o,
                logits,
            })
        } else {
            None
        };
        let visual = if paths.visual {
            let v = self.visual_proxies(p, pairs)?;
            // Attention weights of a cross-attention visual decoupler are not used.
            let (fa, _) = decouple(p, "i2v.attr", self.cfg.i2v, f, v.a, heads)?;
            let (fo, _) = decouple(p, "i2v.obj", self.cfg.i2v, f, v.o, heads)?;
            let (fa, fo) = (fa.l2_normalize()?, fo.l2_normalize()?);
            let inv_tau = p.var("log_tau_v").scale(-T::one()).exp();
            let branch = |feat: Var<'g, T>, proxies: Var<'g, T>| feat.matmul(proxies.transpose()?)?.scale_by(inv_tau);
            let logits = BranchLogits {
                a: branch(fa, v.a)?,
                o: branch(fo, v.o)?,
                c: branch(f, v.c)?,
            };
            Some(VisualPath {
                proxies: v,
                f_a: fa,
                f_o: fo,
                inv_tau,
                logits,
            })
        } else {
            None
        };
        Ok(Forward { f, text, visual })
    }

    /// Branch targets for a batch labelled with seen pairs.
    pub fn targets(&self, labels: &[Pair]) -> Result<Targets> {
        let seen = self.space.seen();
        let comp = labels
            .iter()
            .map(|l| {
                seen.iter().position(|s| s == l).ok_or_else(|| {
                    Error::Contract(format!("training label {l} is not a seen composition"))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Targets {
            attr: labels.iter().map(|l| l.0).collect(),
            obj: labels.iter().map(|l| l.1).collect(),
            comp,
        })
    }

    /// Training objective on a labelled batch over the seen compositions.
    pub fn total_loss<'g>(
        &self,
        g: &'g Graph<T>,
        p: &BoundParams<'g, '_, T>,
        raw: &Tensor<T>,
        labels: &[Pair],
    ) -> Result<(Var<'g, T>, LossBreakdown, Forward<'g, T>)> {
        let targets = self.targets(labels)?;
        let fwd = self.forward(g, p, raw, self.space.seen(), Paths::from_config(&self.cfg))?;
        let (loss, parts) = combine_losses(
            &self.cfg,
            fwd.text.as_ref().map(|t| t.logits),
            fwd.visual.as_ref().map(|v| v.logits),
            &targets,
        )?;
        Ok((loss, parts, fwd))
    }

    /// Probability rows of every enabled path over `pairs`, without gradients.
    pub fn distributions(&self, raw: &Tensor<T>, pairs: &[Pair]) -> Result<Distributions<T>> {
        let g = Graph::new();
        let p = self.params.bind_frozen(&g);
        let fwd = self.forward(&g, &p, raw, pairs, Paths::from_config(&self.cfg))?;
        Distributions::from_forward(&fwd)
    }
}

/// Detached per-path outputs of a forward pass.
#[derive(Debug, Clone)]
pub struct Distributions<T: Element> {
    pub text: Option<BranchProbs<T>>,
    pub visual: Option<BranchProbs<T>>,
    pub s_a: Option<Tensor<T>>,
    pub s_o: Option<Tensor<T>>,
}

impl<T: Element> Distributions<T> {
    pub fn from_forward(fwd: &Forward<'_, T>) -> Result<Self> {
        let text = fwd.text.as_ref().map(|t| t.logits.probs()).transpose()?;
        let visual = fwd.visual.as_ref().map(|v| v.logits.probs()).transpose()?;
        let val = |v: Option<Var<'_, T>>| v.map(|v| (*v.value()).clone());
        let (s_a, s_o) = match &fwd.text {
            Some(t) => (val(t.s_a), val(t.s_o)),
            None => (None, None),
        };
        Ok(Distributions { text, visual, s_a, s_o })
    }
}

/// Text-path tensors needed to score samples outside the tape.
#[derive(Debug, Clone)]
pub struct TextInputs<T: Element> {
    pub f_a: Tensor<T>,
    pub f_o: Tensor<T>,
    pub s_a: Option<Tensor<T>>,
    pub s_o: Option<Tensor<T>>,
    pub t_a: Tensor<T>,
    pub t_o: Tensor<T>,
    pub t_c: Tensor<T>,
}

/// Visual-path tensors needed to score samples outside the tape.
#[derive(Debug, Clone)]
pub struct VisualInputs<T: Element> {
    pub f_a: Tensor<T>,
    pub f_o: Tensor<T>,
    pub v_a: Tensor<T>,
    pub v_o: Tensor<T>,
    pub v_c: Tensor<T>,
    pub inv_tau: T,
}

/// Decoupled features and class embeddings of a batch, detached.
#[derive(Debug, Clone)]
pub struct ScoringInputs<T: Element> {
    pub pairs: Vec<Pair>,
    pub f: Tensor<T>,
    pub inv_tau_t: T,
    pub text: Option<TextInputs<T>>,
    pub visual: Option<VisualInputs<T>>,
}

impl<T: Element> Model<T> {
    pub fn scoring_inputs(&self, raw: &Tensor<T>, pairs: &[Pair]) -> Result<ScoringInputs<T>> {
        let g = Graph::new();
        let p = self.params.bind_frozen(&g);
        let fwd = self.forward(&g, &p, raw, pairs, Paths::from_config(&self.cfg))?;
        let val = |v: Var<'_, T>| (*v.value()).clone();
        Ok(ScoringInputs {
            pairs: pairs.to_vec(),
            f: val(fwd.f),
            inv_tau_t: self.inv_tau_t(),
            text: fwd.text.as_ref().map(|t| TextInputs {
                f_a: val(t.f_a),
                f_o: val(t.f_o),
                s_a: t.s_a.map(val),
                s_o: t.s_o.map(val),
                t_a: val(t.prototypes.a),
                t_o: val(t.prototypes.o),
                t_c: val(t.prototypes.c),
            }),
            visual: fwd.visual.as_ref().map(|v| VisualInputs {
                f_a: val(v.f_a),
                f_o: val(v.f_o),
                v_a: val(v.proxies.a),
                v_o: val(v.proxies.o),
                v_c: val(v.proxies.c),
                inv_tau: v.inv_tau.value().item(),
            }),
        })
    }
}
