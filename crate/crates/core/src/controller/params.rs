use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::priors::{GenerationState, Priors};
use super::{entropy, masked_softmax, ControllerConfig};
use crate::error::{Error, Result};
use crate::expr::TokenLibrary;

pub const CHECKPOINT_VERSION: &str = "classsr-controller/1";

const INIT_SCALE: f64 = 0.08;

/// Offsets of every tensor inside the flat parameter vector.
///
/// Gate rows are ordered reset, update, candidate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Layout {
    pub vocab: usize,
    pub embed: usize,
    pub hidden: usize,
    pub emb: usize,
    pub w_in: usize,
    pub w_hid: usize,
    pub b_in: usize,
    pub b_hid: usize,
    pub w_out: usize,
    pub b_out: usize,
    pub total: usize,
}

impl Layout {
    pub fn new(vocab: usize, embed: usize, hidden: usize) -> Layout {
        let d_in = 3 * embed;
        let emb = 0;
        let w_in = emb + (vocab + 1) * embed;
        let w_hid = w_in + 3 * hidden * d_in;
        let b_in = w_hid + 3 * hidden * hidden;
        let b_hid = b_in + 3 * hidden;
        let w_out = b_hid + 3 * hidden;
        let b_out = w_out + vocab * hidden;
        let total = b_out + vocab;
        Layout { vocab, embed, hidden, emb, w_in, w_hid, b_in, b_hid, w_out, b_out, total }
    }

    pub fn d_in(&self) -> usize {
        3 * self.embed
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ControllerParams {
    layout: Layout,
    data: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: String,
    pub vocab: usize,
    pub embedding_size: usize,
    pub hidden_size: usize,
    pub params: Vec<f64>,
}

pub(super) struct Workspace {
    x: Vec<f64>,
    gi: Vec<f64>,
    gh: Vec<f64>,
    pub logits: Vec<f64>,
}

impl Workspace {
    pub fn new(l: &Layout) -> Self {
        Workspace {
            x: vec![0.0; l.d_in()],
            gi: vec![0.0; 3 * l.hidden],
            gh: vec![0.0; 3 * l.hidden],
            logits: vec![0.0; l.vocab],
        }
    }
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn matvec(w: &[f64], b: &[f64], x: &[f64], out: &mut [f64]) {
    let n = x.len();
    for (i, o) in out.iter_mut().enumerate() {
        let row = &w[i * n..(i + 1) * n];
        *o = b[i] + row.iter().zip(x).map(|(a, c)| a * c).sum::<f64>();
    }
}

struct StepCache {
    inputs: [usize; 3],
    x: Vec<f64>,
    h_prev: Vec<f64>,
    r: Vec<f64>,
    z: Vec<f64>,
    n: Vec<f64>,
    hn: Vec<f64>,
    h: Vec<f64>,
    probs: Vec<f64>,
    chosen: usize,
}

impl ControllerParams {
    /// Output projection zero, everything else uniform in `[-0.08, 0.08]`.
    pub fn init(library: &TokenLibrary, cfg: &ControllerConfig, seed: u64) -> Self {
        let layout = Layout::new(library.len(), cfg.embedding_size, cfg.hidden_size);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data: Vec<f64> = (0..layout.total).map(|_| rng.gen_range(-INIT_SCALE..=INIT_SCALE)).collect();
        data[layout.w_out..].iter_mut().for_each(|v| *v = 0.0);
        ControllerParams { layout, data }
    }

    pub fn from_flat(layout: Layout, data: Vec<f64>) -> Result<Self> {
        if data.len() != layout.total {
            return Err(Error::contract(format!("expected {} parameters, got {}", layout.total, data.len())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract("non-finite controller parameter"));
        }
        Ok(ControllerParams { layout, data })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION.into(),
            vocab: self.layout.vocab,
            embedding_size: self.layout.embed,
            hidden_size: self.layout.hidden,
            params: self.data.clone(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint, library: &TokenLibrary) -> Result<Self> {
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::config(format!("unsupported checkpoint version {:?}", ck.version)));
        }
        if ck.vocab != library.len() {
            return Err(Error::config(format!(
                "checkpoint vocabulary has {} tokens, library has {}",
                ck.vocab,
                library.len()
            )));
        }
        Self::from_flat(Layout::new(ck.vocab, ck.embedding_size, ck.hidden_size), ck.params.clone())
    }

    fn input_ids(&self, state: &GenerationState) -> [usize; 3] {
        let none = self.layout.vocab;
        let (prev, parent, sibling) = state.context();
        [prev.unwrap_or(none), parent.unwrap_or(none), sibling.unwrap_or(none)]
    }

    fn gates(&self, ids: [usize; 3], h: &[f64], ws: &mut Workspace) {
        let l = &self.layout;
        let e = l.embed;
        for (k, id) in ids.iter().enumerate() {
            ws.x[k * e..(k + 1) * e].copy_from_slice(&self.data[l.emb + id * e..l.emb + (id + 1) * e]);
        }
        let d = &self.data;
        let h3 = 3 * l.hidden;
        matvec(&d[l.w_in..l.w_hid], &d[l.b_in..l.b_in + h3], &ws.x, &mut ws.gi);
        matvec(&d[l.w_hid..l.b_in], &d[l.b_hid..l.b_hid + h3], h, &mut ws.gh);
    }

    /// Advance the hidden state and write the next-token logits.
    pub(super) fn step(&self, state: &GenerationState, h: &mut [f64], ws: &mut Workspace) {
        let l = &self.layout;
        let hs = l.hidden;
        self.gates(self.input_ids(state), h, ws);
        for j in 0..hs {
            let r = sigmoid(ws.gi[j] + ws.gh[j]);
            let z = sigmoid(ws.gi[hs + j] + ws.gh[hs + j]);
            let n = (ws.gi[2 * hs + j] + r * ws.gh[2 * hs + j]).tanh();
            h[j] = (1.0 - z) * n + z * h[j];
        }
        let d = &self.data;
        matvec(&d[l.w_out..l.b_out], &d[l.b_out..l.total], h, &mut ws.logits);
    }

    /// Accumulate into `grad` the gradient of
    /// `w_logp * log p(tokens) + w_ent * sum_t H_t`; returns (log p, sum H).
    pub fn backprop(
        &self,
        priors: &Priors,
        tokens: &[usize],
        w_logp: f64,
        w_ent: f64,
        grad: &mut [f64],
    ) -> Result<(f64, f64)> {
        let l = self.layout;
        let (hs, v, e) = (l.hidden, l.vocab, l.embed);
        let mut ws = Workspace::new(&l);
        let mut state = priors.start();
        let mut h = vec![0.0; hs];
        let mut mask = vec![false; v];
        let mut caches = Vec::with_capacity(tokens.len());
        let (mut logp, mut ent) = (0.0, 0.0);
        for &tok in tokens {
            if state.is_complete() {
                return Err(Error::contract("tokens continue past a complete expression"));
            }
            let inputs = self.input_ids(&state);
            self.gates(inputs, &h, &mut ws);
            let h_prev = h.clone();
            let mut r = vec![0.0; hs];
            let mut z = vec![0.0; hs];
            let mut n = vec![0.0; hs];
            let hn = ws.gh[2 * hs..].to_vec();
            for j in 0..hs {
                r[j] = sigmoid(ws.gi[j] + ws.gh[j]);
                z[j] = sigmoid(ws.gi[hs + j] + ws.gh[hs + j]);
                n[j] = (ws.gi[2 * hs + j] + r[j] * hn[j]).tanh();
                h[j] = (1.0 - z[j]) * n[j] + z[j] * h_prev[j];
            }
            matvec(&self.data[l.w_out..l.b_out], &self.data[l.b_out..l.total], &h, &mut ws.logits);
            if tok >= v || priors.feasible(&state, &mut mask) == 0 || !mask[tok] {
                return Err(Error::contract(format!("token {tok} has zero probability at step {}", caches.len())));
            }
            let mut probs = vec![0.0; v];
            masked_softmax(&ws.logits, &mask, &mut probs);
            logp += probs[tok].ln();
            ent += entropy(&probs);
            caches.push(StepCache { inputs, x: ws.x.clone(), h_prev, r, z, n, hn, h: h.clone(), probs, chosen: tok });
            state.push(priors, tok);
        }
        if !state.is_complete() {
            return Err(Error::contract("sequence is not a complete expression"));
        }

        let d_in = l.d_in();
        let mut dh_next = vec![0.0; hs];
        let mut dl = vec![0.0; v];
        let mut dh = vec![0.0; hs];
        let mut da = vec![0.0; 3 * hs];
        let mut dhn = vec![0.0; hs];
        for c in caches.iter().rev() {
            let h_t = entropy(&c.probs);
            for j in 0..v {
                let p = c.probs[j];
                dl[j] = if p > 0.0 {
                    let onehot = if j == c.chosen { 1.0 } else { 0.0 };
                    w_logp * (onehot - p) - w_ent * p * (p.ln() + h_t)
                } else {
                    0.0
                };
            }
            dh.copy_from_slice(&dh_next);
            for j in 0..v {
                if dl[j] == 0.0 {
                    continue;
                }
                grad[l.b_out + j] += dl[j];
                let row = l.w_out + j * hs;
                for k in 0..hs {
                    grad[row + k] += dl[j] * c.h[k];
                    dh[k] += dl[j] * self.data[row + k];
                }
            }
            for j in 0..hs {
                let dn = dh[j] * (1.0 - c.z[j]);
                let dz = dh[j] * (c.h_prev[j] - c.n[j]);
                dh_next[j] = dh[j] * c.z[j];
                let dan = dn * (1.0 - c.n[j] * c.n[j]);
                dhn[j] = dan * c.r[j];
                let dr = dan * c.hn[j];
                da[j] = dr * c.r[j] * (1.0 - c.r[j]);
                da[hs + j] = dz * c.z[j] * (1.0 - c.z[j]);
                da[2 * hs + j] = dan;
            }
            // input-side: rows of W_in and b_in use da for all three gates
            let mut dx = vec![0.0; d_in];
            for i in 0..3 * hs {
                let g = da[i];
                if g == 0.0 {
                    continue;
                }
                grad[l.b_in + i] += g;
                let row = l.w_in + i * d_in;
                for k in 0..d_in {
                    grad[row + k] += g * c.x[k];
                    dx[k] += g * self.data[row + k];
                }
            }
            // hidden-side: candidate rows see the reset-gated signal
            for i in 0..3 * hs {
                let g = if i < 2 * hs { da[i] } else { dhn[i - 2 * hs] };
                if g == 0.0 {
                    continue;
                }
                grad[l.b_hid + i] += g;
                let row = l.w_hid + i * hs;
                for k in 0..hs {
                    grad[row + k] += g * c.h_prev[k];
                    dh_next[k] += g * self.data[row + k];
                }
            }
            for (slot, id) in c.inputs.iter().enumerate() {
                let base = l.emb + id * e;
                for k in 0..e {
                    grad[base + k] += dx[slot * e + k];
                }
            }
        }
        Ok((logp, ent))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::LibrarySpec;

    #[test]
    fn layout_counts_every_tensor() {
        let l = Layout::new(5, 2, 3);
        assert_eq!(l.total, 6 * 2 + 9 * 6 + 9 * 3 + 9 + 9 + 5 * 3 + 5);
    }

    #[test]
    fn checkpoint_roundtrip_is_exact() {
        let spec: LibrarySpec = serde_json::from_value(serde_json::json!({
            "operators": ["+"], "variables": [{"name": "x"}],
        }))
        .unwrap();
        let lib = TokenLibrary::from_spec(&spec).unwrap();
        let cfg = ControllerConfig { hidden_size: 4, embedding_size: 2, ..Default::default() };
        let p = ControllerParams::init(&lib, &cfg, 11);
        let text = serde_json::to_string(&p.to_checkpoint()).unwrap();
        let back: Checkpoint = serde_json::from_str(&text).unwrap();
        assert_eq!(ControllerParams::from_checkpoint(&back, &lib).unwrap(), p);
        let mut bad = back.clone();
        bad.version = "other".into();
        assert!(ControllerParams::from_checkpoint(&bad, &lib).is_err());
    }
}
