//! Causal self-attention prior over raster-ordered token grids.
//!
//! Position `t` sees a start token followed by tokens `0..t`, so its logits
//! depend only on tokens before `t`. The output head starts at zero, which
//! makes an untrained prior exactly uniform.

use dualvae_autodiff::{Adam, AdamConfig, Graph, ParamId, ParamStore, Real, Tensor, Var};
use rand::Rng;

use crate::config::PriorConfig;
use crate::error::{Error, Result};
use crate::latents::TokenGrid;
use crate::layers::{Ctx, Linear, Norm, LRELU_SLOPE};

/// Upper bound on rows sharing one attention score matrix.
const ATTENTION_ROWS: usize = 512;

#[derive(Clone, Debug)]
pub struct Block {
    pub ln_attn: Norm,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub proj: Linear,
    pub ln_mlp: Norm,
    pub fc_in: Linear,
    pub fc_out: Linear,
}

#[derive(Clone)]
pub struct Prior<R: Real> {
    pub cfg: PriorConfig,
    pub vocab: usize,
    pub grid: (usize, usize),
    pub store: ParamStore<R>,
    pub token_embedding: ParamId,
    pub position_embedding: ParamId,
    pub blocks: Vec<Block>,
    pub ln_out: Norm,
    pub head: Linear,
}

impl<R: Real> Prior<R> {
    pub fn new(cfg: &PriorConfig, vocab: usize, grid: (usize, usize), rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        if vocab == 0 || grid.0 * grid.1 == 0 {
            return Err(Error::Contract("prior needs a non-empty vocabulary and grid".into()));
        }
        let c = cfg.channels;
        let len = grid.0 * grid.1;
        let mut store = ParamStore::new();
        let token_embedding = store.add("prior.token_embedding", Tensor::randn([vocab + 1, c], 0.02, rng));
        let position_embedding = store.add("prior.position_embedding", Tensor::randn([len, c], 0.02, rng));
        let blocks = (0..cfg.blocks)
            .map(|b| {
                let n = |s: &str| format!("prior.block{b}.{s}");
                Block {
                    ln_attn: Norm::new(&mut store, &n("ln_attn"), c),
                    query: Linear::new(&mut store, &n("query"), c, c, rng),
                    key: Linear::new(&mut store, &n("key"), c, c, rng),
                    value: Linear::new(&mut store, &n("value"), c, c, rng),
                    proj: Linear::new(&mut store, &n("proj"), c, c, rng),
                    ln_mlp: Norm::new(&mut store, &n("ln_mlp"), c),
                    fc_in: Linear::new(&mut store, &n("fc_in"), c, 4 * c, rng),
                    fc_out: Linear::new(&mut store, &n("fc_out"), 4 * c, c, rng),
                }
            })
            .collect();
        let ln_out = Norm::new(&mut store, "prior.ln_out", c);
        let head = Linear::zeros(&mut store, "prior.head", c, vocab);
        Ok(Self {
            cfg: cfg.clone(),
            vocab,
            grid,
            store,
            token_embedding,
            position_embedding,
            blocks,
            ln_out,
            head,
        })
    }

    pub fn seq_len(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    fn check(&self, seqs: &[Vec<usize>]) -> Result<()> {
        if seqs.is_empty() {
            return Err(Error::Contract("prior: empty batch".into()));
        }
        for s in seqs {
            if s.len() != self.seq_len() {
                return Err(Error::Contract(format!(
                    "prior: sequence length {} != {}",
                    s.len(),
                    self.seq_len()
                )));
            }
            if let Some(&token) = s.iter().find(|&&t| t >= self.vocab) {
                return Err(Error::TokenOutOfRange {
                    token,
                    vocab: self.vocab,
                });
            }
        }
        Ok(())
    }

    fn dropout<'g>(&self, x: Var<'g, R>, rng: &mut Option<&mut dyn rand::RngCore>) -> Var<'g, R> {
        let p = self.cfg.dropout;
        match rng {
            Some(rng) if p > 0.0 => {
                let keep = R::from_f64(1.0 / (1.0 - p));
                let mask = Tensor::from_fn(x.shape(), |_| if rng.gen::<f64>() < p { R::ZERO } else { keep });
                x * x.graph().constant(mask)
            }
            _ => x,
        }
    }

    /// `[B * T, vocab]` next-token logits. Dropout is applied when `rng` is given.
    pub fn logits<'g>(
        &self,
        cx: &Ctx<'_, 'g, R>,
        seqs: &[Vec<usize>],
        mut rng: Option<&mut dyn rand::RngCore>,
    ) -> Result<Var<'g, R>> {
        self.check(seqs)?;
        let g = cx.g;
        let t = self.seq_len();
        let c = self.cfg.channels;
        let heads = self.cfg.heads;
        let dh = c / heads;
        let mut inputs = Vec::with_capacity(seqs.len() * t);
        for s in seqs {
            inputs.push(self.vocab);
            inputs.extend_from_slice(&s[..t - 1]);
        }
        let positions: Vec<usize> = (0..seqs.len()).flat_map(|_| 0..t).collect();
        let mut h = cx.p(self.token_embedding).gather_rows(&inputs) + cx.p(self.position_embedding).gather_rows(&positions);
        let scale = 1.0 / (dh as f64).sqrt();
        let group = (ATTENTION_ROWS / t).max(1);
        for block in &self.blocks {
            let a = block.ln_attn.forward(cx, h);
            let (q, k, v) = (block.query.forward(cx, a), block.key.forward(cx, a), block.value.forward(cx, a));
            // Groups of sequences share one score matrix; the block mask keeps them independent.
            let per_head: Vec<_> = (0..heads)
                .map(|hd| {
                    let groups: Vec<_> = (0..seqs.len())
                        .step_by(group)
                        .map(|first| {
                            let rows = group.min(seqs.len() - first) * t;
                            let part = |m: Var<'g, R>| m.narrow(0, first * t, rows).narrow(1, hd * dh, dh);
                            let scores = part(q).matmul(part(k).transpose()).scale(scale);
                            scores.block_causal_softmax(t).matmul(part(v))
                        })
                        .collect();
                    if groups.len() == 1 {
                        groups[0]
                    } else {
                        g.concat(&groups, 0)
                    }
                })
                .collect();
            let attn = block.proj.forward(cx, g.concat(&per_head, 1));
            h = h + self.dropout(attn, &mut rng);
            let m = block.ln_mlp.forward(cx, h);
            let m = block.fc_out.forward(cx, block.fc_in.forward(cx, m).leaky_relu(LRELU_SLOPE));
            h = h + self.dropout(m, &mut rng);
        }
        Ok(self.head.forward(cx, self.ln_out.forward(cx, h)))
    }

    /// Mean negative log-likelihood in nats per token.
    pub fn nll(&self, seqs: &[Vec<usize>]) -> Result<f64> {
        let g = Graph::new();
        let cx = Ctx::new(&g, &self.store, false);
        let targets: Vec<usize> = seqs.concat();
        Ok(self.logits(&cx, seqs, None)?.cross_entropy(&targets).item().to_f64())
    }

    /// One optimisation step on a batch; returns the batch NLL before the update.
    pub fn train_step(&mut self, adam: &mut Adam<R>, seqs: &[Vec<usize>], rng: &mut impl Rng) -> Result<f64> {
        let g = Graph::new();
        let cx = Ctx::new(&g, &self.store, true);
        let targets: Vec<usize> = seqs.concat();
        let loss = self.logits(&cx, seqs, Some(rng))?.cross_entropy(&targets);
        let value = loss.item().to_f64();
        let grads = g.backward(loss)?;
        adam.step(&mut self.store, &grads);
        Ok(value)
    }

    pub fn optimizer(&self) -> Adam<R> {
        Adam::new(
            AdamConfig {
                lr: self.cfg.lr,
                ..AdamConfig::default()
            },
            &self.store,
        )
    }

    /// Ancestral sampling of `n` grids at `temperature`.
    pub fn sample(&self, n: usize, temperature: f64, rng: &mut impl Rng) -> Result<Vec<TokenGrid>> {
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(Error::Contract(format!("temperature must be positive, got {temperature}")));
        }
        let t = self.seq_len();
        let mut seqs = vec![vec![0usize; t]; n];
        for pos in 0..t {
            let g = Graph::new();
            let cx = Ctx::new(&g, &self.store, false);
            let logits = self.logits(&cx, &seqs, None)?.value();
            for (s, seq) in seqs.iter_mut().enumerate() {
                let row = &logits.data()[(s * t + pos) * self.vocab..(s * t + pos + 1) * self.vocab];
                seq[pos] = sample_row(row, temperature, rng);
            }
        }
        seqs.into_iter()
            .map(|s| TokenGrid::new(self.grid.0, self.grid.1, s, self.vocab))
            .collect()
    }

    pub fn cast<S: Real>(&self) -> Prior<S> {
        Prior {
            cfg: self.cfg.clone(),
            vocab: self.vocab,
            grid: self.grid,
            store: self.store.cast(),
            token_embedding: self.token_embedding,
            position_embedding: self.position_embedding,
            blocks: self.blocks.clone(),
            ln_out: self.ln_out.clone(),
            head: self.head.clone(),
        }
    }
}

/// Categorical draw from `softmax(row / temperature)`, computed in `f64`.
pub fn sample_row<R: Real>(row: &[R], temperature: f64, rng: &mut impl Rng) -> usize {
    let scaled: Vec<f64> = row.iter().map(|v| v.to_f64() / temperature).collect();
    let m = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = scaled.iter().map(|v| (v - m).exp()).collect();
    let total: f64 = w.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, wi) in w.iter().enumerate() {
        if u < *wi {
            return i;
        }
        u -= wi;
    }
    // Rounding left a sliver past the end: take the most likely entry.
    w.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}
