//! Toy denoiser: a two-level residual encoder-decoder backbone, a parallel
//! conditioning branch fed `(x_t, masked image, mask)`, and zero-initialised
//! 1x1 gates that add the branch features into the backbone at four sites.
//!
//! Parameter names:
//! `bb.*` backbone, `br.*` branch, `gate.{k}.*` gates, `lora.{target}.{a,b}`
//! adapters.

use crate::error::DiffusionError;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use spm_autodiff::{ParamStore, Tape, Tensor, Var};
use std::collections::BTreeMap;

pub const CH1: usize = 16;
pub const CH2: usize = 32;
pub const TEMB_IN: usize = 32;
pub const TEMB: usize = 64;
pub const DEFAULT_PRESERVATION: f64 = 0.8;

/// Injection sites: backbone block and its channel count.
pub const SITES: [(&str, usize); 4] = [("enc1", CH1), ("enc2", CH2), ("mid", CH2), ("dec1", CH2)];

/// Branch input conv, branch mid conv, branch last conv and the four gates.
pub const LORA_TARGETS: [&str; 7] = [
    "br.in.w",
    "br.mid.c1.w",
    "br.dec1.c2.w",
    "gate.0.w",
    "gate.1.w",
    "gate.2.w",
    "gate.3.w",
];

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub target: String,
    pub rank: usize,
    pub alpha: f64,
}

impl LoraAdapter {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn a_name(&self) -> String {
        format!("lora.{}.a", self.target)
    }

    pub fn b_name(&self) -> String {
        format!("lora.{}.b", self.target)
    }
}

/// Conditioning for the branch, in model space. `masked` is the clean
/// signal zeroed inside the mask; `mask` is 1 inside, 0 outside.
#[derive(Debug, Clone, PartialEq)]
pub struct Conditioning {
    pub masked: Vec<f64>,
    pub mask: Vec<f64>,
}

/// A batch of `n` single-channel `h x w` inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub x_t: Vec<f64>,
    pub t: Vec<usize>,
    pub cond: Option<Conditioning>,
}

impl Batch {
    fn validate(&self) -> Result<(), DiffusionError> {
        let len = self.n * self.h * self.w;
        let bad = self.x_t.len() != len
            || self.t.len() != self.n
            || self.h % 2 != 0
            || self.w % 2 != 0
            || self.cond.as_ref().is_some_and(|c| c.masked.len() != len || c.mask.len() != len);
        if bad {
            return Err(spm_autodiff::AutodiffError::ShapeMismatch(format!(
                "batch of {} {}x{} (even sides required)",
                self.n, self.h, self.w
            ))
            .into());
        }
        Ok(())
    }
}

/// Sinusoidal embedding of integer timesteps, `[n, TEMB_IN]`.
pub fn timestep_embedding(t: &[usize]) -> Vec<f64> {
    let half = TEMB_IN / 2;
    let mut out = Vec::with_capacity(t.len() * TEMB_IN);
    for &ti in t {
        let freqs = (0..half).map(|i| (-(10_000f64.ln()) * i as f64 / half as f64).exp());
        let args: Vec<f64> = freqs.map(|f| ti as f64 * f).collect();
        out.extend(args.iter().map(|a| a.sin()));
        out.extend(args.iter().map(|a| a.cos()));
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyDenoiser {
    pub params: ParamStore,
    /// Preservation factor applied to gate outputs.
    pub w: f64,
    pub adapters: Vec<LoraAdapter>,
    /// Optimisation steps applied so far (pretraining plus fine-tuning).
    pub train_steps: u64,
}

fn conv_param(p: &mut ParamStore, name: &str, out: usize, inp: usize, k: usize, gain: f64, rng: &mut ChaCha8Rng) {
    let std = gain * (1.0 / (inp * k * k) as f64).sqrt();
    p.insert(format!("{name}.w"), Tensor::randn(&[out, inp, k, k], std, rng));
    p.insert(format!("{name}.b"), Tensor::zeros(&[out]));
}

fn linear_param(p: &mut ParamStore, name: &str, out: usize, inp: usize, rng: &mut ChaCha8Rng) {
    let std = (1.0 / inp as f64).sqrt();
    p.insert(format!("{name}.w"), Tensor::randn(&[out, inp], std, rng));
    p.insert(format!("{name}.b"), Tensor::zeros(&[out]));
}

fn res_params(p: &mut ParamStore, name: &str, c: usize, rng: &mut ChaCha8Rng) {
    linear_param(p, &format!("{name}.t"), c, TEMB, rng);
    conv_param(p, &format!("{name}.c1"), c, c, 3, 2f64.sqrt(), rng);
    conv_param(p, &format!("{name}.c2"), c, c, 3, 0.3, rng);
}

/// Branch blocks, copied from the backbone when the branch is created.
const BRANCH_BLOCKS: [&str; 5] = ["enc1", "down", "enc2", "mid", "dec1"];

impl ToyDenoiser {
    /// Randomly initialised backbone without a branch.
    pub fn new_backbone(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        linear_param(&mut p, "bb.temb", TEMB, TEMB_IN, &mut rng);
        conv_param(&mut p, "bb.in", CH1, 1, 3, 2f64.sqrt(), &mut rng);
        res_params(&mut p, "bb.enc1", CH1, &mut rng);
        conv_param(&mut p, "bb.down", CH2, CH1, 3, 2f64.sqrt(), &mut rng);
        res_params(&mut p, "bb.enc2", CH2, &mut rng);
        res_params(&mut p, "bb.mid", CH2, &mut rng);
        res_params(&mut p, "bb.dec1", CH2, &mut rng);
        conv_param(&mut p, "bb.up", CH1, CH2, 3, 2f64.sqrt(), &mut rng);
        res_params(&mut p, "bb.dec2", CH1, &mut rng);
        conv_param(&mut p, "bb.out", 1, CH1, 3, 0.5, &mut rng);
        Self {
            params: p,
            w: DEFAULT_PRESERVATION,
            adapters: Vec::new(),
            train_steps: 0,
        }
    }

    pub fn has_backbone(&self) -> bool {
        self.params.contains("bb.in.w") && self.params.contains("bb.out.w")
    }

    pub fn has_branch(&self) -> bool {
        self.params.contains("br.in.w")
    }

    /// Adds the conditioning branch as a copy of the backbone blocks. The
    /// noisy-image input channel copies `bb.in`; the masked-image and mask
    /// channels get fresh He-scaled weights drawn from `seed`. Gates start at zero.
    pub fn add_branch(&mut self, seed: u64) -> Result<(), DiffusionError> {
        if !self.has_backbone() {
            return Err(DiffusionError::MissingBackbone);
        }
        if self.has_branch() {
            return Ok(());
        }
        let copies: Vec<(String, Tensor)> = self
            .params
            .iter()
            .filter(|(n, _)| BRANCH_BLOCKS.iter().any(|b| n.starts_with(&format!("bb.{b}."))))
            .map(|(n, t)| (format!("br.{}", &n[3..]), Tensor::new(&t.shape, t.data.clone()).expect("same shape")))
            .collect();
        for (n, t) in copies {
            self.params.insert(n, t);
        }
        let win = &self.params.get("bb.in.w").expect("backbone present").data;
        let fresh = Tensor::randn(&[CH1 * 27], (2.0f64 / 27.0).sqrt(), &mut ChaCha8Rng::seed_from_u64(seed)).data;
        let mut w3 = fresh;
        for o in 0..CH1 {
            w3[o * 27..o * 27 + 9].copy_from_slice(&win[o * 9..o * 9 + 9]);
        }
        let b = self.params.get("bb.in.b").expect("backbone present").data.clone();
        self.params.insert("br.in.w", Tensor::new(&[CH1, 3, 3, 3], w3)?);
        self.params.insert("br.in.b", Tensor::new(&[CH1], b)?);
        for (k, (_, c)) in SITES.iter().enumerate() {
            self.params.insert(format!("gate.{k}.w"), Tensor::zeros(&[*c, *c, 1, 1]));
            self.params.insert(format!("gate.{k}.b"), Tensor::zeros(&[*c]));
        }
        Ok(())
    }

    pub fn backbone_numel(&self) -> usize {
        self.params.iter().filter(|(n, _)| n.starts_with("bb.")).map(|(_, t)| t.numel()).sum()
    }

    pub fn lora_numel(&self) -> usize {
        self.params.iter().filter(|(n, _)| n.starts_with("lora.")).map(|(_, t)| t.numel()).sum()
    }

    /// Attaches rank-`rank` adapters with `B = 0` and `A ~ N(0, 0.01²)`.
    /// Returns the number of adapter parameters added.
    pub fn attach_lora(&mut self, targets: &[&str], rank: usize, alpha: f64, seed: u64) -> Result<usize, DiffusionError> {
        if rank == 0 {
            return Err(DiffusionError::Config("LoRA rank must be positive".into()));
        }
        let mut seen: Vec<&str> = Vec::new();
        for &t in targets {
            let is_conv = self.params.get(t).is_some_and(|w| w.shape.len() == 4);
            if !is_conv {
                return Err(DiffusionError::UnknownTarget(t.to_string()));
            }
            if seen.contains(&t) || self.adapters.iter().any(|a| a.target == t) {
                return Err(DiffusionError::DuplicateAdapter(t.to_string()));
            }
            seen.push(t);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut added = 0;
        for &t in targets {
            let shape = self.params.get(t).expect("checked").shape.clone();
            let (d, k) = (shape[0], shape[1] * shape[2] * shape[3]);
            let ad = LoraAdapter {
                target: t.to_string(),
                rank,
                alpha,
            };
            self.params.insert(ad.a_name(), Tensor::randn(&[rank, k], 0.01, &mut rng));
            self.params.insert(ad.b_name(), Tensor::zeros(&[d, rank]));
            added += rank * (d + k);
            self.adapters.push(ad);
        }
        Ok(added)
    }

    /// Folds every adapter into its weight and removes it.
    pub fn merge_lora(&mut self) -> Result<(), DiffusionError> {
        let adapters = std::mem::take(&mut self.adapters);
        for ad in &adapters {
            let mut tape = Tape::new();
            let vars = self.params.record(&mut tape);
            let eff = effective_weight(&mut tape, &vars, ad)?;
            let merged = tape.value(eff).to_vec();
            let w = self.params.get_mut(&ad.target).expect("adapter target exists");
            w.data = merged;
            self.params.remove(&ad.a_name());
            self.params.remove(&ad.b_name());
        }
        Ok(())
    }

    /// Records all parameters on `tape` and runs the denoiser. With
    /// conditioning and a branch present the dual-branch path is used,
    /// otherwise the backbone alone.
    pub fn forward(&self, tape: &mut Tape, vars: &BTreeMap<String, Var>, batch: &Batch) -> Result<Var, DiffusionError> {
        batch.validate()?;
        let mut net = Net { tape, vars, model: self };
        let temb = net.temb(&batch.t)?;
        let x = net.tape.constant(&[batch.n, 1, batch.h, batch.w], batch.x_t.clone())?;
        let injections = match (&batch.cond, self.has_branch()) {
            (Some(cond), true) => Some(net.branch(batch, cond, temb)?),
            _ => None,
        };
        net.backbone(x, temb, injections)
    }

    /// Backbone-only forward pass, ignoring any branch.
    pub fn forward_backbone(&self, tape: &mut Tape, vars: &BTreeMap<String, Var>, batch: &Batch) -> Result<Var, DiffusionError> {
        let plain = Batch { cond: None, ..batch.clone() };
        self.forward(tape, vars, &plain)
    }

    /// Noise prediction for a batch, without gradient tracking.
    pub fn predict(&self, batch: &Batch) -> Result<Vec<f64>, DiffusionError> {
        let mut frozen = self.params.clone();
        frozen.set_trainable(|_| false);
        let mut tape = Tape::new();
        let vars = frozen.record(&mut tape);
        let out = self.forward(&mut tape, &vars, batch)?;
        Ok(tape.value(out).to_vec())
    }

    pub fn predict_backbone(&self, batch: &Batch) -> Result<Vec<f64>, DiffusionError> {
        self.predict(&Batch { cond: None, ..batch.clone() })
    }
}

fn effective_weight(tape: &mut Tape, vars: &BTreeMap<String, Var>, ad: &LoraAdapter) -> Result<Var, DiffusionError> {
    let w = vars[&ad.target];
    let shape = tape.shape(w).to_vec();
    let ba = tape.matmul(vars[&ad.b_name()], vars[&ad.a_name()])?;
    let ba = tape.reshape(ba, &shape)?;
    let ba = tape.scale(ba, ad.scale());
    Ok(tape.add(w, ba)?)
}

struct Net<'a> {
    tape: &'a mut Tape,
    vars: &'a BTreeMap<String, Var>,
    model: &'a ToyDenoiser,
}

impl Net<'_> {
    fn param(&self, name: &str) -> Result<Var, DiffusionError> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| DiffusionError::Config(format!("missing parameter `{name}`")))
    }

    fn weight(&mut self, name: &str) -> Result<Var, DiffusionError> {
        match self.model.adapters.iter().find(|a| a.target == name) {
            Some(ad) => effective_weight(self.tape, self.vars, ad),
            None => self.param(name),
        }
    }

    fn conv(&mut self, name: &str, x: Var, stride: usize) -> Result<Var, DiffusionError> {
        let w = self.weight(&format!("{name}.w"))?;
        let b = self.param(&format!("{name}.b"))?;
        Ok(self.tape.conv2d(x, w, Some(b), stride)?)
    }

    fn temb(&mut self, t: &[usize]) -> Result<Var, DiffusionError> {
        let e = self.tape.constant(&[t.len(), TEMB_IN], timestep_embedding(t))?;
        let (w, b) = (self.param("bb.temb.w")?, self.param("bb.temb.b")?);
        let h = self.tape.linear(e, w, Some(b))?;
        Ok(self.tape.silu(h))
    }

    /// `x + conv2(silu(conv1(silu(x)) + proj(temb)))`.
    fn res(&mut self, name: &str, x: Var, temb: Var) -> Result<Var, DiffusionError> {
        let a = self.tape.silu(x);
        let h = self.conv(&format!("{name}.c1"), a, 1)?;
        let (w, b) = (self.param(&format!("{name}.t.w"))?, self.param(&format!("{name}.t.b"))?);
        let tp = self.tape.linear(temb, w, Some(b))?;
        let h = self.tape.add_channel(h, tp)?;
        let h = self.tape.silu(h);
        let h = self.conv(&format!("{name}.c2"), h, 1)?;
        Ok(self.tape.add(x, h)?)
    }

    fn inject(&mut self, h: Var, inj: &Option<[Var; 4]>, site: usize) -> Result<Var, DiffusionError> {
        match inj {
            Some(v) => Ok(self.tape.add(h, v[site])?),
            None => Ok(h),
        }
    }

    fn backbone(&mut self, x: Var, temb: Var, inj: Option<[Var; 4]>) -> Result<Var, DiffusionError> {
        let h0 = self.conv("bb.in", x, 1)?;
        let h1 = self.res("bb.enc1", h0, temb)?;
        let h1 = self.inject(h1, &inj, 0)?;
        let d = self.tape.silu(h1);
        let d = self.conv("bb.down", d, 2)?;
        let h2 = self.res("bb.enc2", d, temb)?;
        let h2 = self.inject(h2, &inj, 1)?;
        let h3 = self.res("bb.mid", h2, temb)?;
        let h3 = self.inject(h3, &inj, 2)?;
        let h4 = self.res("bb.dec1", h3, temb)?;
        let h4 = self.inject(h4, &inj, 3)?;
        let u = self.tape.silu(h4);
        let u = self.tape.upsample2(u)?;
        let u = self.conv("bb.up", u, 1)?;
        let u = self.tape.add(u, h1)?;
        let h5 = self.res("bb.dec2", u, temb)?;
        let o = self.tape.silu(h5);
        self.conv("bb.out", o, 1)
    }

    /// Branch features at the four sites, passed through the gates and
    /// scaled by the preservation factor.
    fn branch(&mut self, batch: &Batch, cond: &Conditioning, temb: Var) -> Result<[Var; 4], DiffusionError> {
        let plane = batch.h * batch.w;
        let mut input = Vec::with_capacity(3 * batch.n * plane);
        for s in 0..batch.n {
            let r = s * plane..(s + 1) * plane;
            input.extend_from_slice(&batch.x_t[r.clone()]);
            input.extend_from_slice(&cond.masked[r.clone()]);
            input.extend_from_slice(&cond.mask[r]);
        }
        let x = self.tape.constant(&[batch.n, 3, batch.h, batch.w], input)?;
        let f0 = self.conv("br.in", x, 1)?;
        let f1 = self.res("br.enc1", f0, temb)?;
        let d = self.tape.silu(f1);
        let d = self.conv("br.down", d, 2)?;
        let f2 = self.res("br.enc2", d, temb)?;
        let f3 = self.res("br.mid", f2, temb)?;
        let f4 = self.res("br.dec1", f3, temb)?;
        let mut out = Vec::with_capacity(4);
        for (k, f) in [f1, f2, f3, f4].into_iter().enumerate() {
            let g = self.conv(&format!("gate.{k}"), f, 1)?;
            out.push(self.tape.scale(g, self.model.w));
        }
        Ok([out[0], out[1], out[2], out[3]])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(seed: u64, n: usize) -> Batch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let len = n * 8 * 8;
        let x = Tensor::randn(&[len], 1.0, &mut rng).data;
        let masked = Tensor::randn(&[len], 0.5, &mut rng).data;
        let mask = (0..len).map(|i| if i % 5 == 0 { 1.0 } else { 0.0 }).collect();
        Batch {
            n,
            h: 8,
            w: 8,
            x_t: x,
            t: (0..n).map(|i| 17 * i + 3).collect(),
            cond: Some(Conditioning { masked, mask }),
        }
    }

    #[test]
    fn output_shape_and_determinism() {
        let m = ToyDenoiser::new_backbone(1);
        let b = batch(2, 2);
        let y = m.predict(&b).unwrap();
        assert_eq!(y.len(), 128);
        assert_eq!(y, m.predict(&b).unwrap());
        assert!(m.predict(&Batch { h: 7, ..b }).is_err());
    }

    #[test]
    fn branch_creation() {
        let mut m = ToyDenoiser::new_backbone(1);
        let before = m.backbone_numel();
        m.add_branch(0).unwrap();
        assert_eq!(m.backbone_numel(), before);
        for k in 0..4 {
            assert!(m.params.get(&format!("gate.{k}.w")).unwrap().data.iter().all(|&v| v == 0.0));
        }
        assert_eq!(m.params.get("br.mid.c1.w"), m.params.get("bb.mid.c1.w"));
        let b = batch(3, 1);
        assert_eq!(m.predict(&b).unwrap(), m.predict_backbone(&b).unwrap());
    }

    #[test]
    fn adapter_errors() {
        let mut m = ToyDenoiser::new_backbone(1);
        m.add_branch(0).unwrap();
        assert!(matches!(m.attach_lora(&["nope.w"], 8, 8.0, 0), Err(DiffusionError::UnknownTarget(_))));
        assert!(matches!(m.attach_lora(&["bb.temb.w"], 8, 8.0, 0), Err(DiffusionError::UnknownTarget(_))));
        assert!(matches!(
            m.attach_lora(&["gate.0.w", "gate.0.w"], 8, 8.0, 0),
            Err(DiffusionError::DuplicateAdapter(_))
        ));
        assert!(m.adapters.is_empty());
        m.attach_lora(&["gate.0.w"], 8, 8.0, 0).unwrap();
        assert!(matches!(m.attach_lora(&["gate.0.w"], 8, 8.0, 0), Err(DiffusionError::DuplicateAdapter(_))));
    }

    #[test]
    fn embedding_layout() {
        let e = timestep_embedding(&[0, 5]);
        assert_eq!(e.len(), 2 * TEMB_IN);
        assert!(e[..16].iter().all(|&v| v == 0.0));
        assert!(e[16..32].iter().all(|&v| v == 1.0));
        assert_eq!(e[32], 5f64.sin());
    }
}
