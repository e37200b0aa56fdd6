//! Training losses and schedule weights.

use candle_core::{bail, CpuStorage, CustomOp2, DType, Layout, Shape, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Conditioning;

/// Predictions are clipped to [BCE_CLIP, 1 − BCE_CLIP] before taking logs.
pub const BCE_CLIP: f64 = 1e-7;
/// Probabilities are floored here before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;
pub const BANDWIDTH_FLOOR: f64 = 1e-6;

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Mean binary cross-entropy over all cells.
pub fn bce(x: &Tensor, x_hat: &Tensor) -> Result<Tensor> {
    if x.dims() != x_hat.dims() {
        return Err(Error::shape(format!("{:?}", x.dims()), format!("{:?}", x_hat.dims())));
    }
    check_target(x)?;
    let p = x_hat.clamp(BCE_CLIP, 1.0 - BCE_CLIP)?;
    let pos = (x * p.log()?)?;
    let neg = (x.affine(-1.0, 1.0)? * p.affine(-1.0, 1.0)?.log()?)?;
    Ok((pos + neg)?.mean_all()?.neg()?)
}

fn check_target(x: &Tensor) -> Result<()> {
    let lo = scalar(&x.min_all()?)?;
    let hi = scalar(&x.max_all()?)?;
    if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) {
        return Err(Error::invalid(format!("bce target outside [0,1]: [{lo}, {hi}]")));
    }
    Ok(())
}

/// Target cells per logit cell along each axis.
#[derive(Clone, Copy)]
struct Upsample {
    b: usize,
    h: usize,
    w: usize,
    fh: usize,
    fw: usize,
}

impl Upsample {
    fn cells(&self) -> usize {
        self.b * self.h * self.fh * self.w * self.fw
    }

    /// Calls `f(target index, logit index)` for every target cell.
    fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        let (big_h, big_w) = (self.h * self.fh, self.w * self.fw);
        for bi in 0..self.b {
            for r in 0..big_h {
                let lrow = (bi * self.h + r / self.fh) * self.w;
                let xrow = (bi * big_h + r) * big_w;
                for c in 0..big_w {
                    f(xrow + c, lrow + c / self.fw);
                }
            }
        }
    }
}

fn sigmoid(l: f64) -> f64 {
    1.0 / (1.0 + (-l).exp())
}

fn cell_bce(x: f64, l: f64) -> f64 {
    let p = sigmoid(l).clamp(BCE_CLIP, 1.0 - BCE_CLIP);
    -(x * p.ln() + (1.0 - x) * (1.0 - p).ln())
}

fn cell_grad(x: f64, l: f64) -> f64 {
    let p = sigmoid(l);
    if (BCE_CLIP..=1.0 - BCE_CLIP).contains(&p) {
        p - x
    } else {
        0.0
    }
}

fn as_f64(s: &CpuStorage, l: &Layout) -> candle_core::Result<Vec<f64>> {
    let Some((a, b)) = l.contiguous_offsets() else { bail!("bce: operands must be contiguous") };
    Ok(match s {
        CpuStorage::F32(v) => v[a..b].iter().map(|x| *x as f64).collect(),
        CpuStorage::F64(v) => v[a..b].to_vec(),
        _ => bail!("bce: unsupported dtype"),
    })
}

fn storage_like(s: &CpuStorage, v: Vec<f64>) -> CpuStorage {
    match s {
        CpuStorage::F32(_) => CpuStorage::F32(v.into_iter().map(|x| x as f32).collect()),
        _ => CpuStorage::F64(v),
    }
}

struct BceLogits(Upsample);
struct BceLogitsGrad(Upsample);

impl CustomOp2 for BceLogits {
    fn name(&self) -> &'static str {
        "bce-logits"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (x, l) = (as_f64(s1, l1)?, as_f64(s2, l2)?);
        let mut acc = 0.0;
        self.0.for_each(|i, j| acc += cell_bce(x[i], l[j]));
        Ok((storage_like(s2, vec![acc / self.0.cells() as f64]), Shape::from(())))
    }

    fn bwd(&self, x: &Tensor, l: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let dl = x.apply_op2_no_bwd(l, &BceLogitsGrad(self.0))?;
        Ok((None, Some(dl.broadcast_mul(grad)?)))
    }
}

impl CustomOp2 for BceLogitsGrad {
    fn name(&self) -> &'static str {
        "bce-logits-grad"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (x, l) = (as_f64(s1, l1)?, as_f64(s2, l2)?);
        let mut g = vec![0.0; l.len()];
        let n = self.0.cells() as f64;
        self.0.for_each(|i, j| g[j] += cell_grad(x[i], l[j]) / n);
        Ok((storage_like(s2, g), l2.shape().clone()))
    }
}

/// `bce(x, sigmoid(upsample(logits)))` in one pass, where `logits` (B, h, w)
/// is nearest-upsampled by integer factors to the (B, H, W) target grid.
pub fn bce_logits(x: &Tensor, logits: &Tensor) -> Result<Tensor> {
    let (b, big_h, big_w) = x.dims3()?;
    let (lb, h, w) = logits.dims3()?;
    if lb != b || h == 0 || w == 0 || big_h % h != 0 || big_w % w != 0 {
        return Err(Error::shape(format!("(B, H, W) = {:?} divisible by the logit grid", x.dims()), format!("{:?}", logits.dims())));
    }
    check_target(x)?;
    let up = Upsample { b, h, w, fh: big_h / h, fw: big_w / w };
    Ok(x.contiguous()?.apply_op2(&logits.contiguous()?, BceLogits(up))?)
}

/// Squared Euclidean distances between rows of `a` (N, d) and `b` (M, d).
fn sq_dists(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let diff = a.unsqueeze(1)?.broadcast_sub(&b.unsqueeze(0)?)?;
    Ok(diff.sqr()?.sum(2)?)
}

/// Median-heuristic bandwidth: Σ² is the median squared distance over all
/// unordered pairs of the concatenated sets, floored at [`BANDWIDTH_FLOOR`].
pub fn median_bandwidth(a: &Tensor, b: &Tensor) -> Result<f64> {
    let all = Tensor::cat(&[a, b], 0)?.detach().to_dtype(DType::F64)?;
    let rows = all.to_vec2::<f64>()?;
    let mut d = Vec::with_capacity(rows.len() * rows.len() / 2);
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            d.push(rows[i].iter().zip(&rows[j]).map(|(x, y)| (x - y).powi(2)).sum::<f64>());
        }
    }
    if d.is_empty() {
        return Ok(BANDWIDTH_FLOOR.max(1.0));
    }
    d.sort_by(f64::total_cmp);
    let n = d.len();
    let med = if n % 2 == 1 { d[n / 2] } else { 0.5 * (d[n / 2 - 1] + d[n / 2]) };
    Ok(med.max(BANDWIDTH_FLOOR))
}

/// Biased (V-statistic) MMD with RBF kernel k(x, y) = exp(−‖x−y‖² / 2Σ²).
pub fn mmd_rbf(a: &Tensor, b: &Tensor, sigma2: f64) -> Result<Tensor> {
    let (na, da) = a.dims2()?;
    let (nb, db) = b.dims2()?;
    if na == 0 || nb == 0 {
        return Err(Error::invalid("mmd of an empty point set"));
    }
    if da != db {
        return Err(Error::shape(da, db));
    }
    if !(sigma2 > 0.0) {
        return Err(Error::invalid(format!("bandwidth must be positive, got {sigma2}")));
    }
    let k = |x: &Tensor, y: &Tensor| -> Result<Tensor> {
        Ok((sq_dists(x, y)? * (-0.5 / sigma2))?.exp()?.mean_all()?)
    };
    // Both cross orientations, so that swapping the arguments is bit-exact.
    let cross = (k(a, b)? + k(b, a)?)?;
    Ok(((k(a, a)? + k(b, b)?)? - cross)?)
}

/// MMD with the median-heuristic bandwidth recomputed from the two sets.
pub fn mmd_rbf_median(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let s2 = median_bandwidth(a, b)?;
    mmd_rbf(a, b, s2)
}

fn check_targets(probs: &Tensor, targets: &[u32]) -> Result<(usize, usize)> {
    let (b, n) = probs.dims2()?;
    if targets.len() != b {
        return Err(Error::shape(b, targets.len()));
    }
    if let Some(t) = targets.iter().find(|t| **t as usize >= n) {
        return Err(Error::invalid(format!("class index {t} out of range for {n} classes")));
    }
    Ok((b, n))
}

fn onehot(targets: &[u32], n: usize, like: &Tensor) -> Result<Tensor> {
    let mut v = vec![0f64; targets.len() * n];
    for (i, t) in targets.iter().enumerate() {
        v[i * n + *t as usize] = 1.0;
    }
    Ok(Tensor::from_vec(v, (targets.len(), n), like.device())?.to_dtype(like.dtype())?)
}

/// Batch mean of −log p[target].
pub fn class_nll(probs: &Tensor, targets: &[u32]) -> Result<Tensor> {
    let (_, n) = check_targets(probs, targets)?;
    let picked = (probs * onehot(targets, n, probs)?)?.sum(1)?;
    Ok(picked.clamp(PROB_FLOOR, 1.0)?.log()?.mean_all()?.neg()?)
}

/// Batch mean of −log Σ_{i≠target} p[i], the probability mass on the
/// one-hot complement of the true class.
pub fn adversarial_nll(probs: &Tensor, targets: &[u32]) -> Result<Tensor> {
    let (_, n) = check_targets(probs, targets)?;
    if n < 2 {
        return Err(Error::invalid("adversarial loss needs at least 2 classes"));
    }
    let complement = onehot(targets, n, probs)?.affine(-1.0, 1.0)?;
    let mass = (probs * complement)?.sum(1)?;
    Ok(mass.clamp(PROB_FLOOR, 1.0)?.log()?.mean_all()?.neg()?)
}

/// 0 before `start`, linear ramp to `target` over [start, end], `target` after.
pub fn warmup_weight(epoch: usize, start: usize, end: usize, target: f64) -> f64 {
    if epoch >= end {
        target
    } else if epoch <= start {
        0.0
    } else {
        target * (epoch - start) as f64 / (end - start) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub beta: f64,
    pub alpha: f64,
    pub warmup_start: usize,
    pub warmup_end: usize,
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0 && self.alpha >= 0.0) {
            return Err(Error::invalid("loss weights must be non-negative"));
        }
        if self.warmup_start >= self.warmup_end {
            return Err(Error::invalid(format!(
                "warmup start {} must precede warmup end {}",
                self.warmup_start, self.warmup_end
            )));
        }
        Ok(())
    }

    /// (β, α) in effect during `epoch`.
    pub fn at(&self, epoch: usize) -> (f64, f64) {
        (
            warmup_weight(epoch, self.warmup_start, self.warmup_end, self.beta),
            warmup_weight(epoch, self.warmup_start, self.warmup_end, self.alpha),
        )
    }
}

/// The four ablation models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Unconditioned WAE.
    WaeMmd,
    /// Semitone and octave FiLM conditioning.
    WaeNote,
    /// Note and style conditioning.
    WaeStyle,
    /// Note and style conditioning with the adversarial latent discriminator.
    WaeFader,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::WaeMmd, Variant::WaeNote, Variant::WaeStyle, Variant::WaeFader];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::WaeMmd => "wae_mmd",
            Variant::WaeNote => "wae_note",
            Variant::WaeStyle => "wae_style",
            Variant::WaeFader => "wae_fader",
        }
    }

    pub fn conditioning(&self) -> Conditioning {
        match self {
            Variant::WaeMmd => Conditioning { note: false, style: false },
            Variant::WaeNote => Conditioning { note: true, style: false },
            Variant::WaeStyle | Variant::WaeFader => Conditioning::ALL,
        }
    }

    pub fn adversarial(&self) -> bool {
        *self == Variant::WaeFader
    }

    /// Target MMD strength.
    pub fn beta(&self) -> f64 {
        if *self == Variant::WaeMmd {
            500.0
        } else {
            40.0
        }
    }

    /// Target adversarial strength; zero without a discriminator.
    pub fn alpha(&self) -> f64 {
        if self.adversarial() {
            4.0
        } else {
            0.0
        }
    }

    /// Schedule for a run of `epochs` epochs.
    pub fn weights(&self, epochs: usize, warmup_start: usize) -> LossWeights {
        let end = (epochs / 2).max(warmup_start + 1);
        LossWeights { beta: self.beta(), alpha: self.alpha(), warmup_start, warmup_end: end }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown variant `{s}`")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn fused_bce_matches_composed_ops() {
        let dev = Device::Cpu;
        let x = Tensor::rand(0f64, 1.0, (2, 6, 8), &dev).unwrap();
        // a few saturated logits exercise the clipping
        let mut lv: Vec<f64> = Tensor::randn(0f64, 3.0, (2 * 3 * 2,), &dev).unwrap().to_vec1().unwrap();
        lv[0] = 40.0;
        lv[5] = -40.0;
        let l = Var::from_tensor(&Tensor::from_vec(lv, (2, 3, 2), &dev).unwrap()).unwrap();
        let fused = bce_logits(&x, &l).unwrap();
        let composed = {
            let up = crate::nn::resize_nearest(&l.unsqueeze(1).unwrap(), 6, 8).unwrap().squeeze(1).unwrap();
            bce(&x, &candle_nn::ops::sigmoid(&up).unwrap()).unwrap()
        };
        let (a, b) = (fused.to_scalar::<f64>().unwrap(), composed.to_scalar::<f64>().unwrap());
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        let ga = fused.backward().unwrap().get(&l).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let gb = composed.backward().unwrap().get(&l).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for (p, q) in ga.iter().zip(&gb) {
            assert!((p - q).abs() < 1e-12, "{p} vs {q}");
        }
        assert!(bce_logits(&x, &Tensor::zeros((2, 4, 8), DType::F64, &dev).unwrap()).is_err());
    }

    fn t2(v: &[Vec<f64>]) -> Tensor {
        let n = v.len();
        let d = v[0].len();
        Tensor::from_vec(v.concat(), (n, d), &Device::Cpu).unwrap()
    }

    fn val(t: Tensor) -> f64 {
        scalar(&t).unwrap()
    }

    fn brute_mmd(a: &[Vec<f64>], b: &[Vec<f64>], s2: f64) -> f64 {
        let k = |x: &[f64], y: &[f64]| {
            let d: f64 = x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum();
            (-d / (2.0 * s2)).exp()
        };
        let mean = |p: &[Vec<f64>], q: &[Vec<f64>]| {
            let mut s = 0.0;
            for x in p {
                for y in q {
                    s += k(x, y);
                }
            }
            s / (p.len() * q.len()) as f64
        };
        mean(a, a) + mean(b, b) - 2.0 * mean(a, b)
    }

    fn points(rng: &mut impl Rng, n: usize, shift: f64) -> Vec<Vec<f64>> {
        (0..n).map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0) + shift).collect()).collect()
    }

    #[test]
    fn bce_values() {
        let dev = Device::Cpu;
        let half = Tensor::full(0.5f64, (4, 4), &dev).unwrap();
        assert!((val(bce(&half, &half).unwrap()) - std::f64::consts::LN_2).abs() < 1e-9);
        let z = Tensor::zeros((3, 3), DType::F64, &dev).unwrap();
        assert!(val(bce(&z, &z).unwrap()) < 1e-6);
        let x = Tensor::new(&[0.9f64], &dev).unwrap();
        let xh = Tensor::new(&[0.1f64], &dev).unwrap();
        let want = -(0.9 * 0.1f64.ln() + 0.1 * 0.9f64.ln());
        assert!((val(bce(&x, &xh).unwrap()) - want).abs() < 1e-12);
        assert!((want - 2.0829).abs() < 1e-4);
        let bad = Tensor::new(&[1.5f64], &dev).unwrap();
        assert!(bce(&bad, &xh).is_err());
    }

    #[test]
    fn variant_targets() {
        assert_eq!(Variant::WaeMmd.beta(), 500.0);
        assert_eq!((Variant::WaeFader.beta(), Variant::WaeFader.alpha()), (40.0, 4.0));
        assert_eq!(Variant::WaeStyle.alpha(), 0.0);
        assert!(!Variant::WaeMmd.conditioning().note);
        assert!(!Variant::WaeNote.conditioning().style);
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
            assert_eq!(serde_json::to_string(&v).unwrap(), format!("\"{v}\""));
        }
        assert!("wae".parse::<Variant>().is_err());
        let w = Variant::WaeFader.weights(60, 30);
        assert_eq!(w.at(29), (0.0, 0.0));
        assert_eq!(w.at(30), (0.0, 0.0));
        assert_eq!(w.at(59), (40.0, 4.0));
    }

    #[test]
    fn mmd_matches_brute_force() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let a = points(&mut rng, 5, 0.0);
            let b = points(&mut rng, 5, 0.5);
            let s2 = rng.gen_range(0.1..3.0);
            let got = val(mmd_rbf(&t2(&a), &t2(&b), s2).unwrap());
            let want = brute_mmd(&a, &b, s2);
            assert!(((got - want) / want).abs() < 1e-10, "{got} vs {want}");
        }
    }

    #[test]
    fn mmd_identical_sets_exact_zero() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let a = t2(&points(&mut rng, 7, 0.0));
        assert_eq!(val(mmd_rbf(&a, &a, 0.7).unwrap()), 0.0);
        assert_eq!(val(mmd_rbf_median(&a, &a).unwrap()), 0.0);
    }

    #[test]
    fn mmd_single_points() {
        let a = t2(&[vec![0.0, 1.0, 2.0]]);
        let b = t2(&[vec![1.0, -1.0, 0.5]]);
        let d2 = 1.0 + 4.0 + 2.25;
        let want = 2.0 - 2.0 * (-d2 / (2.0 * 1.3f64)).exp();
        assert!((val(mmd_rbf(&a, &b, 1.3).unwrap()) - want).abs() < 1e-14);
    }

    #[test]
    fn mmd_rejects_empty() {
        let e = Tensor::zeros((0, 3), DType::F64, &Device::Cpu).unwrap();
        let a = t2(&[vec![0.0; 3]]);
        assert!(mmd_rbf(&e, &a, 1.0).is_err());
    }

    #[test]
    fn median_bandwidth_oracle() {
        // pairwise squared distances on a line at 0, 1, 3: {1, 9, 4} -> median 4
        let a = t2(&[vec![0.0, 0.0, 0.0], vec![1.0, 0.0, 0.0]]);
        let b = t2(&[vec![3.0, 0.0, 0.0]]);
        assert_eq!(median_bandwidth(&a, &b).unwrap(), 4.0);
        let same = t2(&[vec![1.0, 1.0, 1.0], vec![1.0, 1.0, 1.0]]);
        assert_eq!(median_bandwidth(&same, &same).unwrap(), BANDWIDTH_FLOOR);
    }

    #[test]
    fn mmd_gradient_matches_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let a0 = points(&mut rng, 6, 0.0);
        let b = t2(&points(&mut rng, 6, 0.3));
        let a = Var::from_tensor(&t2(&a0)).unwrap();
        let s2 = 0.8;
        let g = mmd_rbf(a.as_tensor(), &b, s2).unwrap().backward().unwrap();
        let ga = g.get(&a).unwrap().to_vec2::<f64>().unwrap();
        let h = 1e-6;
        for i in 0..6 {
            for j in 0..3 {
                let mut p = a0.clone();
                p[i][j] += h;
                let mut m = a0.clone();
                m[i][j] -= h;
                let fd = (val(mmd_rbf(&t2(&p), &b, s2).unwrap()) - val(mmd_rbf(&t2(&m), &b, s2).unwrap())) / (2.0 * h);
                let rel = (fd - ga[i][j]).abs() / fd.abs().max(1e-8);
                assert!(rel < 1e-4, "{fd} vs {}", ga[i][j]);
            }
        }
    }

    #[test]
    fn nll_values() {
        let uni = t2(&[vec![0.25; 4]]);
        assert!((val(class_nll(&uni, &[2]).unwrap()) - 4f64.ln()).abs() < 1e-12);
        let sure = t2(&[vec![0.0, 1.0, 0.0]]);
        assert_eq!(val(class_nll(&sure, &[1]).unwrap()), 0.0);
        let p = t2(&[vec![0.7, 0.2, 0.1]]);
        assert!((val(class_nll(&p, &[1]).unwrap()) + 0.2f64.ln()).abs() < 1e-12);
        assert!((val(class_nll(&sure, &[0]).unwrap()) + PROB_FLOOR.ln()).abs() < 1e-9);
    }

    #[test]
    fn adversarial_values() {
        let worst = t2(&[vec![1.0, 0.0, 0.0]]);
        assert!((val(adversarial_nll(&worst, &[0]).unwrap()) + PROB_FLOOR.ln()).abs() < 1e-9);
        let best = t2(&[vec![0.0, 0.6, 0.4]]);
        assert!(val(adversarial_nll(&best, &[0]).unwrap()).abs() < 1e-15);
        let half = t2(&[vec![0.5, 0.5]]);
        assert!((val(adversarial_nll(&half, &[0]).unwrap()) - 2f64.ln()).abs() < 1e-12);
        assert!(adversarial_nll(&t2(&[vec![1.0]]), &[0]).is_err());
    }

    #[test]
    fn warmup_schedule() {
        assert_eq!(warmup_weight(3, 10, 30, 40.0), 0.0);
        assert_eq!(warmup_weight(10, 10, 30, 40.0), 0.0);
        assert_eq!(warmup_weight(20, 10, 30, 40.0), 20.0);
        assert_eq!(warmup_weight(30, 10, 30, 40.0), 40.0);
        assert_eq!(warmup_weight(99, 10, 30, 40.0), 40.0);
        let w = LossWeights { beta: 40.0, alpha: 4.0, warmup_start: 10, warmup_end: 30 };
        w.validate().unwrap();
        assert_eq!(w.at(20), (20.0, 2.0));
        assert!(LossWeights { warmup_start: 30, ..w }.validate().is_err());
    }

    fn set_strategy(n: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
        prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 3), 1..=n)
    }

    proptest! {
        #[test]
        fn mmd_symmetric_and_permutation_invariant(a in set_strategy(6), b in set_strategy(6), s2 in 0.05f64..5.0) {
            let ab = val(mmd_rbf(&t2(&a), &t2(&b), s2).unwrap());
            let ba = val(mmd_rbf(&t2(&b), &t2(&a), s2).unwrap());
            prop_assert_eq!(ab, ba);
            prop_assert!(ab >= -1e-12);
            let mut ar = a.clone();
            ar.reverse();
            let abr = val(mmd_rbf(&t2(&ar), &t2(&b), s2).unwrap());
            prop_assert!((ab - abr).abs() <= 1e-12);
        }

        #[test]
        fn binary_adversarial_is_flipped_nll(p in 0.0f64..=1.0, y in 0u32..2) {
            let probs = t2(&[vec![p, 1.0 - p]]);
            let adv = val(adversarial_nll(&probs, &[y]).unwrap());
            let nll = val(class_nll(&probs, &[1 - y]).unwrap());
            prop_assert_eq!(adv, nll);
        }

        #[test]
        fn losses_finite_in_range(x in prop::collection::vec(0.0f64..=1.0, 8), xh in prop::collection::vec(0.0f64..=1.0, 8)) {
            let dev = Device::Cpu;
            let a = Tensor::from_vec(x, 8, &dev).unwrap();
            let b = Tensor::from_vec(xh.clone(), 8, &dev).unwrap();
            prop_assert!(val(bce(&a, &b).unwrap()).is_finite());
            let s: f64 = xh.iter().sum::<f64>().max(1e-9);
            let probs: Vec<f64> = xh.iter().map(|v| v / s).collect();
            let p = Tensor::from_vec(probs, (2, 4), &dev).unwrap();
            prop_assert!(val(class_nll(&p, &[0, 3]).unwrap()).is_finite());
            prop_assert!(val(adversarial_nll(&p, &[1, 2]).unwrap()).is_finite());
        }
    }
}
