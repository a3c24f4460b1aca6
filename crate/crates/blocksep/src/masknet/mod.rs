//! The mask-estimation network: a shared BLSTM-FC trunk with a speaker
//! adaptation multiplier feeding three specialised heads (separation mask,
//! speaker embedding, embedding-update gate).
//!
//! The forward pass takes the block magnitude spectrogram concatenated with
//! the current residual mask, plus a speaker adaptation vector from the
//! previous block. All gradients are computed analytically by a hand-written
//! backward pass; see [`backward`].

mod checkpoint;
mod layers;

pub use checkpoint::{load_params, load_params_compatible, save_params};
pub use layers::{sigmoid, Activation, Blstm, BlstmCache, Dense, Lstm};

use ndarray::{concatenate, s, Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::Mask;

/// Speaker embedding vector. The all-zero vector is the "no prior speaker"
/// sentinel used for blind extraction.
pub type Embedding = Array1<f64>;

pub fn zero_embedding(dim: usize) -> Embedding {
    Array1::zeros(dim)
}

/// Network architecture description. Stored inside checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    /// Frequency bins F of the spectrogram input and the mask output.
    pub n_bins: usize,
    /// Hidden units per BLSTM direction.
    pub hidden: usize,
    /// Width of the trunk FC layer (and of the adaptation multiplier).
    pub trunk_dim: usize,
    /// Widths of the first two embedding-head FC layers.
    pub emb_hidden1: usize,
    pub emb_hidden2: usize,
    /// Embedding dimensionality.
    pub emb_dim: usize,
    /// Whether the embedding-update gate is active.
    pub use_gate: bool,
    /// Length-normalise embeddings (cosine-loss variant).
    pub normalize_embedding: bool,
    /// Training-speaker vocabulary size for the CE classifier head.
    pub n_speakers: Option<usize>,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            n_bins: 129,
            hidden: 300,
            trunk_dim: 300,
            emb_hidden1: 50,
            emb_hidden2: 50,
            emb_dim: 128,
            use_gate: true,
            normalize_embedding: false,
            n_speakers: None,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.n_bins,
            self.hidden,
            self.trunk_dim,
            self.emb_hidden1,
            self.emb_hidden2,
            self.emb_dim,
        ];
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidConfig(
                "all network dimensions must be positive".into(),
            ));
        }
        if self.n_speakers == Some(0) {
            return Err(Error::InvalidConfig(
                "classifier needs at least one speaker".into(),
            ));
        }
        Ok(())
    }
}

/// All trainable parameters. The same structure doubles as the gradient
/// accumulator (see [`ModelParams::zeros_like`]).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub cfg: NetConfig,
    pub blstm1: Blstm,
    pub blstm2: Blstm,
    pub trunk: Dense,
    pub adapt: Dense,
    pub mask_head: Dense,
    pub emb_fc1: Dense,
    pub emb_fc2: Dense,
    pub emb_fc3: Dense,
    pub emb_out: Dense,
    pub gate: Dense,
    pub classifier: Option<Dense>,
}

pub enum TensorRef<'a> {
    M(&'a Array2<f64>),
    V(&'a Array1<f64>),
}

pub enum TensorMut<'a> {
    M(&'a mut Array2<f64>),
    V(&'a mut Array1<f64>),
}

/// Initialises parameters deterministically from a seed: orthogonal
/// recurrent matrices, Glorot-uniform FC weights, zero biases.
pub fn init_params(cfg: &NetConfig, seed: u64) -> Result<ModelParams> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f = cfg.n_bins;
    let h = cfg.hidden;
    let d = cfg.trunk_dim;
    let e = cfg.emb_dim;
    Ok(ModelParams {
        blstm1: Blstm::init(h, 2 * f, &mut rng),
        blstm2: Blstm::init(h, 2 * h, &mut rng),
        trunk: Dense::glorot(d, 2 * h, Activation::Sigmoid, &mut rng),
        adapt: Dense::glorot(d, e, Activation::Linear, &mut rng),
        mask_head: Dense::glorot(f, d, Activation::Sigmoid, &mut rng),
        emb_fc1: Dense::glorot(cfg.emb_hidden1, d, Activation::Sigmoid, &mut rng),
        emb_fc2: Dense::glorot(cfg.emb_hidden2, cfg.emb_hidden1, Activation::Sigmoid, &mut rng),
        emb_fc3: Dense::glorot(e, cfg.emb_hidden2, Activation::Sigmoid, &mut rng),
        emb_out: Dense::glorot(e, e, Activation::Linear, &mut rng),
        gate: Dense::glorot(1, d + e, Activation::Sigmoid, &mut rng),
        classifier: cfg
            .n_speakers
            .map(|n| Dense::glorot(n, e, Activation::Linear, &mut rng)),
        cfg: cfg.clone(),
    })
}

impl ModelParams {
    pub fn zeros_like(&self) -> ModelParams {
        let zd = |d: &Dense| Dense::zeros(d.out_dim(), d.in_dim(), d.act);
        let zl = |l: &Lstm| Lstm::zeros(l.hidden(), l.w_ih.ncols());
        let zb = |b: &Blstm| Blstm {
            fwd: zl(&b.fwd),
            bwd: zl(&b.bwd),
        };
        ModelParams {
            cfg: self.cfg.clone(),
            blstm1: zb(&self.blstm1),
            blstm2: zb(&self.blstm2),
            trunk: zd(&self.trunk),
            adapt: zd(&self.adapt),
            mask_head: zd(&self.mask_head),
            emb_fc1: zd(&self.emb_fc1),
            emb_fc2: zd(&self.emb_fc2),
            emb_fc3: zd(&self.emb_fc3),
            emb_out: zd(&self.emb_out),
            gate: zd(&self.gate),
            classifier: self.classifier.as_ref().map(zd),
        }
    }

    /// Named views of every tensor, in a fixed canonical order.
    pub fn tensors(&self) -> Vec<(String, TensorRef<'_>)> {
        let mut out: Vec<(String, TensorRef)> = Vec::new();
        for (name, b) in [("blstm1", &self.blstm1), ("blstm2", &self.blstm2)] {
            for (dir, l) in [("fwd", &b.fwd), ("bwd", &b.bwd)] {
                out.push((format!("{name}.{dir}.w_ih"), TensorRef::M(&l.w_ih)));
                out.push((format!("{name}.{dir}.w_hh"), TensorRef::M(&l.w_hh)));
                out.push((format!("{name}.{dir}.b"), TensorRef::V(&l.b)));
            }
        }
        for (name, d) in [
            ("trunk", &self.trunk),
            ("adapt", &self.adapt),
            ("mask_head", &self.mask_head),
            ("emb_fc1", &self.emb_fc1),
            ("emb_fc2", &self.emb_fc2),
            ("emb_fc3", &self.emb_fc3),
            ("emb_out", &self.emb_out),
            ("gate", &self.gate),
        ] {
            out.push((format!("{name}.w"), TensorRef::M(&d.w)));
            out.push((format!("{name}.b"), TensorRef::V(&d.b)));
        }
        if let Some(c) = &self.classifier {
            out.push(("classifier.w".into(), TensorRef::M(&c.w)));
            out.push(("classifier.b".into(), TensorRef::V(&c.b)));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, TensorMut<'_>)> {
        let mut out: Vec<(String, TensorMut)> = Vec::new();
        for (name, b) in [
            ("blstm1", &mut self.blstm1),
            ("blstm2", &mut self.blstm2),
        ] {
            for (dir, l) in [("fwd", &mut b.fwd), ("bwd", &mut b.bwd)] {
                out.push((format!("{name}.{dir}.w_ih"), TensorMut::M(&mut l.w_ih)));
                out.push((format!("{name}.{dir}.w_hh"), TensorMut::M(&mut l.w_hh)));
                out.push((format!("{name}.{dir}.b"), TensorMut::V(&mut l.b)));
            }
        }
        for (name, d) in [
            ("trunk", &mut self.trunk),
            ("adapt", &mut self.adapt),
            ("mask_head", &mut self.mask_head),
            ("emb_fc1", &mut self.emb_fc1),
            ("emb_fc2", &mut self.emb_fc2),
            ("emb_fc3", &mut self.emb_fc3),
            ("emb_out", &mut self.emb_out),
            ("gate", &mut self.gate),
        ] {
            out.push((format!("{name}.w"), TensorMut::M(&mut d.w)));
            out.push((format!("{name}.b"), TensorMut::V(&mut d.b)));
        }
        if let Some(c) = &mut self.classifier {
            out.push(("classifier.w".into(), TensorMut::M(&mut c.w)));
            out.push(("classifier.b".into(), TensorMut::V(&mut c.b)));
        }
        out
    }

    pub fn n_params(&self) -> usize {
        self.tensors()
            .iter()
            .map(|(_, t)| match t {
                TensorRef::M(m) => m.len(),
                TensorRef::V(v) => v.len(),
            })
            .sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for (_, t) in self.tensors() {
            match t {
                TensorRef::M(m) => out.extend(m.iter()),
                TensorRef::V(v) => out.extend(v.iter()),
            }
        }
        out
    }

    pub fn assign_flat(&mut self, flat: &[f64]) {
        let mut pos = 0;
        for (_, t) in self.tensors_mut() {
            match t {
                TensorMut::M(m) => {
                    for v in m.iter_mut() {
                        *v = flat[pos];
                        pos += 1;
                    }
                }
                TensorMut::V(a) => {
                    for v in a.iter_mut() {
                        *v = flat[pos];
                        pos += 1;
                    }
                }
            }
        }
        assert_eq!(pos, flat.len(), "flat parameter vector length mismatch");
    }

    /// `self += scale * other`, matching structures.
    pub fn add_scaled(&mut self, other: &ModelParams, scale: f64) {
        let mut others: Vec<f64> = Vec::new();
        for (_, t) in other.tensors() {
            match t {
                TensorRef::M(m) => others.extend(m.iter()),
                TensorRef::V(v) => others.extend(v.iter()),
            }
        }
        let mut pos = 0;
        for (_, t) in self.tensors_mut() {
            match t {
                TensorMut::M(m) => {
                    for v in m.iter_mut() {
                        *v += scale * others[pos];
                        pos += 1;
                    }
                }
                TensorMut::V(a) => {
                    for v in a.iter_mut() {
                        *v += scale * others[pos];
                        pos += 1;
                    }
                }
            }
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.flatten().iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        for (_, t) in self.tensors_mut() {
            match t {
                TensorMut::M(m) => m.mapv_inplace(|v| v * s),
                TensorMut::V(a) => a.mapv_inplace(|v| v * s),
            }
        }
    }
}

/// One forward invocation's inputs.
pub struct NetInput<'a> {
    /// Magnitude spectrogram of the block, T×F.
    pub mag: &'a Array2<f64>,
    /// Residual mask from the previous iteration, T×F.
    pub residual: &'a Mask,
    /// Speaker adaptation vector (zero for blind extraction).
    pub adaptation: &'a Embedding,
}

#[derive(Debug, Clone)]
pub struct NetOutput {
    /// Estimated separation mask, entries strictly in (0, 1).
    pub mask: Mask,
    /// Fresh per-block embedding estimate (before the gate).
    pub fresh_embedding: Embedding,
    /// Embedding to pass to the next block (gated when the gate is active).
    pub embedding: Embedding,
    pub gate_value: f64,
}

/// Intermediate activations kept for the backward pass.
pub struct NetCache {
    pub(crate) x: Array2<f64>,
    pub(crate) c1: BlstmCache,
    pub(crate) h1: Array2<f64>,
    pub(crate) c2: BlstmCache,
    pub(crate) h2: Array2<f64>,
    pub(crate) trunk_y: Array2<f64>,
    pub(crate) q: Array1<f64>,
    pub(crate) a: Array2<f64>,
    pub(crate) mask_y: Array2<f64>,
    pub(crate) u1: Array2<f64>,
    pub(crate) u2: Array2<f64>,
    pub(crate) u3: Array2<f64>,
    pub(crate) e_bar: Array1<f64>,
    /// Pre-normalisation affine output (normalised variant only).
    pub(crate) v: Option<Array1<f64>>,
    pub(crate) fresh: Array1<f64>,
    pub(crate) gate_in: Option<Array1<f64>>,
    pub(crate) gate_value: f64,
    pub(crate) emb_mix: Option<Array1<f64>>,
    pub(crate) emb_final: Array1<f64>,
    pub(crate) z: Array1<f64>,
    pub(crate) prev: Array1<f64>,
    pub(crate) use_gate: bool,
}

/// Gradients flowing out of [`backward`] towards the inputs.
pub struct NetInputGrads {
    pub d_residual: Array2<f64>,
    pub d_adaptation: Array1<f64>,
    pub d_prev_embedding: Array1<f64>,
}

/// Upstream gradients for [`backward`].
pub struct NetUpstream {
    pub d_mask: Array2<f64>,
    /// Gradient on the fresh (pre-gate) embedding from speaker losses.
    pub d_fresh: Array1<f64>,
    /// Gradient on the threaded (post-gate) embedding.
    pub d_embedding: Array1<f64>,
}

fn normalize(v: &Array1<f64>) -> (Array1<f64>, f64) {
    let norm = v.dot(v).sqrt().max(1e-12);
    (v.mapv(|x| x / norm), norm)
}

/// Full forward pass with cached activations.
///
/// `use_gate` is the per-call gate switch: the engine disables it for blind
/// extractions where no previous embedding exists. `gate_override` forces
/// the gate value at inference; 0.0 and 1.0 short-circuit to the previous /
/// fresh embedding bit-exactly.
pub fn forward_cached(
    p: &ModelParams,
    input: &NetInput,
    prev_embedding: &Embedding,
    use_gate: bool,
    gate_override: Option<f64>,
) -> Result<(NetOutput, NetCache)> {
    let f = p.cfg.n_bins;
    let e_dim = p.cfg.emb_dim;
    if input.mag.ncols() != f || input.residual.values.dim() != input.mag.dim() {
        return Err(Error::ShapeMismatch(format!(
            "mag {:?} / residual {:?} / {} bins expected",
            input.mag.dim(),
            input.residual.values.dim(),
            f
        )));
    }
    if input.adaptation.len() != e_dim || prev_embedding.len() != e_dim {
        return Err(Error::ShapeMismatch(format!(
            "adaptation/prev embedding must have dim {e_dim}"
        )));
    }
    let t_len = input.mag.nrows();
    if t_len == 0 {
        return Err(Error::InvalidArgument("empty block".into()));
    }

    let x = concatenate![Axis(1), input.mag.view(), input.residual.values.view()];
    let (h1, c1) = p.blstm1.forward(&x.view());
    let (h2, c2) = p.blstm2.forward(&h1.view());
    let trunk_y = p.trunk.forward(&h2.view());

    // Speaker adaptation: elementwise multiply the trunk activations with an
    // affine transform of the adaptation vector. A zero vector selects the
    // bias, so blind extraction is well-defined.
    let q = p.adapt.forward_vec(&input.adaptation.view());
    let mut a = trunk_y.clone();
    a *= &q.view().insert_axis(Axis(0));

    let mask_y = p.mask_head.forward(&a.view());

    let u1 = p.emb_fc1.forward(&a.view());
    let u2 = p.emb_fc2.forward(&u1.view());
    let u3 = p.emb_fc3.forward(&u2.view());
    let e_bar = u3.mean_axis(Axis(0)).expect("nonempty block");

    let (v, fresh) = if p.cfg.normalize_embedding {
        let v = p.emb_out.forward_vec(&e_bar.view());
        let (unit, _) = normalize(&v);
        (Some(v), unit)
    } else {
        (None, e_bar.clone())
    };

    let (gate_in, gate_value, emb_mix, emb_final) = if use_gate {
        let a_mean = a.mean_axis(Axis(0)).expect("nonempty block");
        let gin = concatenate![Axis(0), a_mean, prev_embedding.view()];
        let g_net = p.gate.forward_vec(&gin.view())[0];
        let g = gate_override.unwrap_or(g_net);
        if g == 0.0 {
            (Some(gin), 0.0, None, prev_embedding.clone())
        } else if g == 1.0 {
            (Some(gin), 1.0, None, fresh.clone())
        } else {
            let mix = fresh.mapv(|x| x * g) + prev_embedding.mapv(|x| x * (1.0 - g));
            let final_e = if p.cfg.normalize_embedding {
                normalize(&mix).0
            } else {
                mix.clone()
            };
            (Some(gin), g, Some(mix), final_e)
        }
    } else {
        (None, 1.0, None, fresh.clone())
    };

    let output = NetOutput {
        mask: Mask::from_unchecked(mask_y.clone()),
        fresh_embedding: fresh.clone(),
        embedding: emb_final.clone(),
        gate_value,
    };
    let cache = NetCache {
        x,
        c1,
        h1,
        c2,
        h2,
        trunk_y,
        q,
        a,
        mask_y,
        u1,
        u2,
        u3,
        e_bar,
        v,
        fresh,
        gate_in,
        gate_value,
        emb_mix,
        emb_final,
        z: input.adaptation.clone(),
        prev: prev_embedding.clone(),
        use_gate,
    };
    Ok((output, cache))
}

/// Forward pass without keeping the cache.
pub fn forward(
    p: &ModelParams,
    input: &NetInput,
    prev_embedding: &Embedding,
    use_gate: bool,
    gate_override: Option<f64>,
) -> Result<NetOutput> {
    forward_cached(p, input, prev_embedding, use_gate, gate_override).map(|(o, _)| o)
}

/// Backward pass. Accumulates parameter gradients into `grads` and returns
/// the gradients w.r.t. the residual input, the adaptation vector and the
/// previous embedding (all of which are produced by earlier net calls during
/// unrolled training).
pub fn backward(
    p: &ModelParams,
    cache: &NetCache,
    upstream: &NetUpstream,
    grads: &mut ModelParams,
) -> NetInputGrads {
    let t_len = cache.x.nrows();
    let f = p.cfg.n_bins;
    let d = p.cfg.trunk_dim;
    let t_f = t_len as f64;

    let mut d_fresh = upstream.d_fresh.clone();
    let mut d_prev = Array1::zeros(p.cfg.emb_dim);
    let mut d_a = Array2::zeros(cache.a.dim());

    // Gate and embedding-threading path.
    if cache.use_gate {
        let g = cache.gate_value;
        let mut d_g = 0.0;
        match (g, &cache.emb_mix) {
            (0.0, _) => d_prev += &upstream.d_embedding,
            (1.0, _) => d_fresh += &upstream.d_embedding,
            (_, Some(mix)) => {
                let d_mix = if p.cfg.normalize_embedding {
                    let unit = &cache.emb_final;
                    let norm = mix.dot(mix).sqrt().max(1e-12);
                    let proj = unit.dot(&upstream.d_embedding);
                    (&upstream.d_embedding - &unit.mapv(|x| x * proj)).mapv(|x| x / norm)
                } else {
                    upstream.d_embedding.clone()
                };
                d_g = d_mix.dot(&(&cache.fresh - &cache.prev));
                d_fresh.scaled_add(g, &d_mix);
                d_prev.scaled_add(1.0 - g, &d_mix);
            }
            (_, None) => unreachable!("interior gate without cached mix"),
        }
        let gin = cache.gate_in.as_ref().expect("gate input cached");
        let y = Array1::from_elem(1, cache.gate_value);
        let d_y = Array1::from_elem(1, d_g);
        let d_gin = p.gate.backward_vec(&gin.view(), &y, &d_y, &mut grads.gate);
        // Split: first trunk_dim entries came from the time-averaged
        // adaptation output, the rest from the previous embedding.
        let d_a_mean = d_gin.slice(s![..d]).to_owned();
        d_prev += &d_gin.slice(s![d..]);
        for mut row in d_a.rows_mut() {
            row.scaled_add(1.0 / t_f, &d_a_mean);
        }
    } else {
        d_fresh += &upstream.d_embedding;
    }

    // Pre-gate normalisation.
    let d_e_bar = if p.cfg.normalize_embedding {
        let v = cache.v.as_ref().expect("pre-norm affine cached");
        let norm = v.dot(v).sqrt().max(1e-12);
        let unit = &cache.fresh;
        let proj = unit.dot(&d_fresh);
        let d_v = (&d_fresh - &unit.mapv(|x| x * proj)).mapv(|x| x / norm);
        p.emb_out
            .backward_vec(&cache.e_bar.view(), v, &d_v, &mut grads.emb_out)
    } else {
        d_fresh
    };

    // Time average.
    let mut d_u3 = Array2::zeros(cache.u3.dim());
    for mut row in d_u3.rows_mut() {
        row.scaled_add(1.0 / t_f, &d_e_bar);
    }
    let d_u2 = p
        .emb_fc3
        .backward(&cache.u2.view(), &cache.u3, &d_u3, &mut grads.emb_fc3);
    let d_u1 = p
        .emb_fc2
        .backward(&cache.u1.view(), &cache.u2, &d_u2, &mut grads.emb_fc2);
    d_a += &p
        .emb_fc1
        .backward(&cache.a.view(), &cache.u1, &d_u1, &mut grads.emb_fc1);

    d_a += &p.mask_head.backward(
        &cache.a.view(),
        &cache.mask_y,
        &upstream.d_mask,
        &mut grads.mask_head,
    );

    // Adaptation multiplier: a = trunk_y ∘ q.
    let mut d_trunk_y = d_a.clone();
    d_trunk_y *= &cache.q.view().insert_axis(Axis(0));
    let mut d_q = Array1::zeros(d);
    for (row_da, row_h) in d_a.rows().into_iter().zip(cache.trunk_y.rows()) {
        for k in 0..d {
            d_q[k] += row_da[k] * row_h[k];
        }
    }
    let d_z = p
        .adapt
        .backward_vec(&cache.z.view(), &cache.q, &d_q, &mut grads.adapt);

    let d_h2 = p.trunk.backward(
        &cache.h2.view(),
        &cache.trunk_y,
        &d_trunk_y,
        &mut grads.trunk,
    );
    let d_h1 = p
        .blstm2
        .backward(&cache.h1.view(), &cache.c2, &d_h2, &mut grads.blstm2);
    let d_x = p
        .blstm1
        .backward(&cache.x.view(), &cache.c1, &d_h1, &mut grads.blstm1);

    NetInputGrads {
        d_residual: d_x.slice(s![.., f..]).to_owned(),
        d_adaptation: d_z,
        d_prev_embedding: d_prev,
    }
}
