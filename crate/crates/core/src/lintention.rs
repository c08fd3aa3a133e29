//! Linear-complexity attention over `P` learned semantic groups.
//!
//! Every pixel is softly assigned to one of `P` groups; the group keys are
//! spatial aggregates of the queries, so each pixel attends to `P` keys
//! instead of `H * W`. The five stages are:
//!
//! | stage                | contraction               | shape          |
//! |----------------------|---------------------------|----------------|
//! | query generator      | `nhwc,cd->nhwd` with W^Q  | `N x H x W x C`|
//! | key generator        | softmax(`nhwc,cp->nhwp`), then `nhwp,nhwc->npc` | `N x P x C` |
//! | value generator      | `npc,cd->npd` with W^V    | `N x P x C`    |
//! | attention scores     | softmax(`npc,nhwc->nhwp` / sqrt(C)) | `N x H x W x P` |
//! | result generator     | `nhwp,npc->nhwc`          | `N x H x W x C`|
//!
//! The layer wraps the module as `layer_norm(x + lintention(x))`.

use std::fs;
use std::path::Path;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::autodiff::{layer_norm_vjp, softmax_vjp, Differentiable, Op};
use crate::einsum::{contract, EinsumSpec};
use crate::error::{Error, Result};
use crate::io::{read_tensor, write_tensor};
use crate::ops::{layer_norm, softmax_lastdim};
use crate::rng::SplitMix64Stream;
use crate::tensor::Tensor;

/// Number of semantic groups used unless configured otherwise.
pub const DEFAULT_GROUPS: usize = 16;
pub const DEFAULT_EPS: f64 = 1e-5;

pub(crate) struct Specs {
    pub query: EinsumSpec,
    pub classify: EinsumSpec,
    pub key: EinsumSpec,
    pub value: EinsumSpec,
    pub score: EinsumSpec,
    pub result: EinsumSpec,
}

pub(crate) fn specs() -> &'static Specs {
    static SPECS: OnceLock<Specs> = OnceLock::new();
    SPECS.get_or_init(|| Specs {
        query: "nhwc,cd->nhwd".parse().unwrap(),
        classify: "nhwc,cp->nhwp".parse().unwrap(),
        key: "nhwp,nhwc->npc".parse().unwrap(),
        value: "npc,cd->npd".parse().unwrap(),
        score: "npc,nhwc->nhwp".parse().unwrap(),
        result: "nhwp,npc->nhwc".parse().unwrap(),
    })
}

/// Projection matrices of one Lintention module.
#[derive(Clone, Debug, PartialEq)]
pub struct LintentionParams {
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    channels: usize,
    groups: usize,
}

impl LintentionParams {
    /// `wq`, `wv` are `C x C`; `wk` is `C x P`.
    pub fn new(wq: Tensor, wk: Tensor, wv: Tensor) -> Result<Self> {
        let shape2 = |t: &Tensor, what: &str| -> Result<(usize, usize)> {
            match t.extents()[..] {
                [a, b] => Ok((a, b)),
                _ => Err(Error::dim(what, "projection must be rank 2")),
            }
        };
        let (c, cq) = shape2(&wq, "wq")?;
        let (ck, p) = shape2(&wk, "wk")?;
        let (cv, cv2) = shape2(&wv, "wv")?;
        if c != cq || cv != c || cv2 != c {
            return Err(Error::dim("c", "wq and wv must be square with side C"));
        }
        if ck != c {
            return Err(Error::dim("c", format!("wk has {ck} rows, expected {c}")));
        }
        Ok(Self {
            wq: wq.with_names(&["c", "d"])?,
            wk: wk.with_names(&["c", "p"])?,
            wv: wv.with_names(&["c", "d"])?,
            channels: c,
            groups: p,
        })
    }

    /// All-zero projections.
    pub fn zeros(c: usize, p: usize) -> Result<Self> {
        Self::new(
            Tensor::zeros(&[("c", c), ("d", c)])?,
            Tensor::zeros(&[("c", c), ("p", p)])?,
            Tensor::zeros(&[("c", c), ("d", c)])?,
        )
    }

    pub fn wq(&self) -> &Tensor {
        &self.wq
    }

    pub fn wk(&self) -> &Tensor {
        &self.wk
    }

    pub fn wv(&self) -> &Tensor {
        &self.wv
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    /// `2 C^2 + C P`.
    pub fn param_count(&self) -> usize {
        self.wq.len() + self.wk.len() + self.wv.len()
    }
}

/// A Lintention module plus the layer norm that follows the residual sum.
#[derive(Clone, Debug, PartialEq)]
pub struct LintentionLayerParams {
    pub core: LintentionParams,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub eps: f64,
}

impl LintentionLayerParams {
    pub fn new(core: LintentionParams, gamma: Vec<f64>, beta: Vec<f64>, eps: f64) -> Result<Self> {
        if gamma.len() != core.channels || beta.len() != core.channels {
            return Err(Error::dim("c", "gamma/beta length must equal C"));
        }
        if eps <= 0.0 {
            return Err(Error::Config("eps must be positive".into()));
        }
        Ok(Self { core, gamma, beta, eps })
    }

    /// Core parameters plus the norm affine.
    pub fn param_count(&self) -> usize {
        self.core.param_count() + self.gamma.len() + self.beta.len()
    }

    /// Writes `wq/wk/wv/gamma/beta.ltnt` and `manifest.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let c = self.core.channels;
        write_tensor(&dir.join("wq.ltnt"), &self.core.wq)?;
        write_tensor(&dir.join("wk.ltnt"), &self.core.wk)?;
        write_tensor(&dir.join("wv.ltnt"), &self.core.wv)?;
        write_tensor(&dir.join("gamma.ltnt"), &Tensor::new(&[("c", c)], self.gamma.clone())?)?;
        write_tensor(&dir.join("beta.ltnt"), &Tensor::new(&[("c", c)], self.beta.clone())?)?;
        let manifest = ParamsManifest {
            c,
            p: self.core.groups,
            eps: self.eps,
            tensors: ["wq", "wk", "wv", "gamma", "beta"].map(|n| format!("{n}.ltnt")).to_vec(),
        };
        let path = dir.join("manifest.json");
        fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let raw = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let m: ParamsManifest = serde_json::from_slice(&raw).map_err(|e| Error::format(&path, e.to_string()))?;
        let core = LintentionParams::new(
            read_tensor(&dir.join("wq.ltnt"))?,
            read_tensor(&dir.join("wk.ltnt"))?,
            read_tensor(&dir.join("wv.ltnt"))?,
        )?;
        if core.channels != m.c || core.groups != m.p {
            return Err(Error::format(&path, "manifest dimensions disagree with tensors"));
        }
        let gamma = read_tensor(&dir.join("gamma.ltnt"))?.into_data();
        let beta = read_tensor(&dir.join("beta.ltnt"))?.into_data();
        Self::new(core, gamma, beta, m.eps)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamsManifest {
    c: usize,
    p: usize,
    eps: f64,
    tensors: Vec<String>,
}

/// Intermediates of one forward pass.
#[derive(Clone, Debug)]
pub struct LintentionTrace {
    pub q: Tensor,
    pub l: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    pub scores: Tensor,
    pub y: Tensor,
}

impl LintentionTrace {
    /// Scalars held by the materialized intermediates.
    pub fn scalar_count(&self) -> usize {
        [&self.q, &self.l, &self.k, &self.v, &self.scores, &self.y]
            .iter()
            .map(|t| t.len())
            .sum()
    }
}

fn check_input(x: &Tensor, c: usize) -> Result<()> {
    if x.rank() != 4 {
        return Err(Error::dim("<rank>", format!("expected (n, h, w, c), got {:?}", x.axis_names())));
    }
    if x.extents()[3] != c {
        return Err(Error::dim(
            "c",
            format!("input has {} channels, parameters expect {c}", x.extents()[3]),
        ));
    }
    Ok(())
}

pub fn query_gen(x: &Tensor, p: &LintentionParams) -> Result<Tensor> {
    check_input(x, p.channels)?;
    contract(&specs().query, x, &p.wq)?.rename("d", "c")
}

/// Per-pixel group assignment `l` and group keys `k`.
pub fn key_gen(x: &Tensor, q: &Tensor, p: &LintentionParams) -> Result<(Tensor, Tensor)> {
    check_input(x, p.channels)?;
    check_input(q, p.channels)?;
    let l = softmax_lastdim(&contract(&specs().classify, x, &p.wk)?)?;
    let k = contract(&specs().key, &l, q)?;
    Ok((l, k))
}

pub fn value_gen(k: &Tensor, p: &LintentionParams) -> Result<Tensor> {
    contract(&specs().value, k, &p.wv)?.rename("d", "c")
}

/// Scaled dot-product scores of every pixel against the `P` keys.
pub fn attention_scores(q: &Tensor, k: &Tensor) -> Result<Tensor> {
    let c = q.extents().last().copied().unwrap_or(1);
    let raw = contract(&specs().score, k, q)?;
    softmax_lastdim(&raw.scale(1.0 / (c as f64).sqrt()))
}

pub fn result_gen(scores: &Tensor, v: &Tensor) -> Result<Tensor> {
    contract(&specs().result, scores, v)
}

pub fn lintention_forward(x: &Tensor, p: &LintentionParams) -> Result<(Tensor, LintentionTrace)> {
    let q = query_gen(x, p)?;
    let (l, k) = key_gen(x, &q, p)?;
    let v = value_gen(&k, p)?;
    let scores = attention_scores(&q, &k)?;
    let y = result_gen(&scores, &v)?;
    let trace = LintentionTrace {
        q,
        l,
        k,
        v,
        scores,
        y: y.clone(),
    };
    Ok((y, trace))
}

/// `layer_norm(x + lintention(x))`; output keeps the input's spatial size.
pub fn lintention_layer_forward(x: &Tensor, p: &LintentionLayerParams) -> Result<Tensor> {
    let (y, _) = lintention_forward(x, &p.core)?;
    let sum = x.add(&y)?;
    layer_norm(&sum, &p.gamma, &p.beta, p.eps)?.with_names(&["n", "h", "w", "c"])
}

/// Seeded projections, uniform in `[-1/sqrt(c), 1/sqrt(c))`, drawn in the
/// order W^Q, W^K, W^V.
pub fn init_params(seed: u64, c: usize, p: usize) -> Result<LintentionParams> {
    if c == 0 || p == 0 {
        return Err(Error::Config("channels and groups must be at least 1".into()));
    }
    let mut rng = SplitMix64Stream::new(seed);
    init_params_from(&mut rng, c, p)
}

pub(crate) fn init_params_from(rng: &mut SplitMix64Stream, c: usize, p: usize) -> Result<LintentionParams> {
    let bound = 1.0 / (c as f64).sqrt();
    let wq = rng.tensor(&[("c", c), ("d", c)], bound)?;
    let wk = rng.tensor(&[("c", c), ("p", p)], bound)?;
    let wv = rng.tensor(&[("c", c), ("d", c)], bound)?;
    LintentionParams::new(wq, wk, wv)
}

/// Seeded layer: random core, `gamma = 1`, `beta = 0`, `eps = 1e-5`.
pub fn init_layer_params(seed: u64, c: usize, p: usize) -> Result<LintentionLayerParams> {
    let core = init_params(seed, c, p)?;
    LintentionLayerParams::new(core, vec![1.0; c], vec![0.0; c], DEFAULT_EPS)
}

struct Cache {
    q: Tensor,
    l: Tensor,
    k: Tensor,
    v: Tensor,
    s: Tensor,
    y: Tensor,
}

fn forward_cached(x: &Tensor, p: &LintentionParams) -> Result<Cache> {
    let (y, t) = lintention_forward(x, p)?;
    Ok(Cache {
        q: t.q,
        l: t.l,
        k: t.k,
        v: t.v,
        s: t.scores,
        y,
    })
}

/// Gradients w.r.t. x, W^Q, W^K, W^V given `upstream` on the output.
fn lintention_backward(x: &Tensor, p: &LintentionParams, c: &Cache, upstream: &Tensor) -> Result<[Tensor; 4]> {
    let sp = specs();
    let grad = |spec: &EinsumSpec, a: &Tensor, b: &Tensor, u: &Tensor| -> Result<Vec<Tensor>> {
        crate::autodiff::vjp(&Op::Contract(spec.clone()), &[a.clone(), b.clone()], u)
    };
    let g = grad(&sp.result, &c.s, &c.v, upstream)?;
    let (gs, gv) = (&g[0], &g[1]);
    let scale = 1.0 / (p.channels as f64).sqrt();
    let graw = softmax_vjp(&c.s, gs)?.scale(scale);
    let g = grad(&sp.score, &c.k, &c.q, &graw)?;
    let (gk_score, gq_score) = (&g[0], &g[1]);
    let g = grad(&sp.value, &c.k, &p.wv, gv)?;
    let (gk_value, gwv) = (&g[0], &g[1]);
    let gk = gk_score.add(gk_value)?;
    let g = grad(&sp.key, &c.l, &c.q, &gk)?;
    let (gl, gq_key) = (&g[0], &g[1]);
    let glogits = softmax_vjp(&c.l, gl)?;
    let g = grad(&sp.classify, x, &p.wk, &glogits)?;
    let (gx_class, gwk) = (&g[0], &g[1]);
    let gq = gq_score.add(gq_key)?;
    let g = grad(&sp.query, x, &p.wq, &gq)?;
    let (gx_query, gwq) = (&g[0], &g[1]);
    Ok([
        gx_class.add(gx_query)?.with_names(&["n", "h", "w", "c"])?,
        gwq.clone(),
        gwk.clone(),
        gwv.clone(),
    ])
}

/// The Lintention module as a differentiable function of `[x, wq, wk, wv]`.
pub struct LintentionOp;

impl Differentiable for LintentionOp {
    fn name(&self) -> String {
        "lintention".into()
    }

    fn forward(&self, inputs: &[Tensor]) -> Result<Tensor> {
        let (x, p) = unpack_core(inputs)?;
        Ok(lintention_forward(x, &p)?.0)
    }

    fn vjp(&self, inputs: &[Tensor], upstream: &Tensor) -> Result<Vec<Tensor>> {
        let (x, p) = unpack_core(inputs)?;
        let cache = forward_cached(x, &p)?;
        cache.y.check_same_shape(upstream)?;
        Ok(lintention_backward(x, &p, &cache, upstream)?.to_vec())
    }
}

/// The Lintention layer as a differentiable function of
/// `[x, wq, wk, wv, gamma, beta]`.
pub struct LintentionLayerOp {
    pub eps: f64,
}

impl Differentiable for LintentionLayerOp {
    fn name(&self) -> String {
        "lintention_layer".into()
    }

    fn forward(&self, inputs: &[Tensor]) -> Result<Tensor> {
        let (x, p) = self.unpack(inputs)?;
        lintention_layer_forward(x, &p)
    }

    fn vjp(&self, inputs: &[Tensor], upstream: &Tensor) -> Result<Vec<Tensor>> {
        let (x, p) = self.unpack(inputs)?;
        let cache = forward_cached(x, &p.core)?;
        let sum = x.add(&cache.y)?;
        sum.check_same_shape(upstream)?;
        let (gsum, gg, gb) = layer_norm_vjp(&sum, &p.gamma, p.eps, upstream)?;
        let [gx, gwq, gwk, gwv] = lintention_backward(x, &p.core, &cache, &gsum)?;
        Ok(vec![
            gx.add(&gsum)?,
            gwq,
            gwk,
            gwv,
            inputs[4].with_data(gg)?,
            inputs[5].with_data(gb)?,
        ])
    }
}

impl LintentionLayerOp {
    fn unpack<'a>(&self, inputs: &'a [Tensor]) -> Result<(&'a Tensor, LintentionLayerParams)> {
        if inputs.len() != 6 {
            return Err(Error::Usage(format!("lintention_layer takes 6 inputs, got {}", inputs.len())));
        }
        let (x, core) = unpack_core(&inputs[..4])?;
        let p = LintentionLayerParams::new(core, inputs[4].data().to_vec(), inputs[5].data().to_vec(), self.eps)?;
        Ok((x, p))
    }
}

fn unpack_core(inputs: &[Tensor]) -> Result<(&Tensor, LintentionParams)> {
    if inputs.len() != 4 {
        return Err(Error::Usage(format!("lintention takes 4 inputs, got {}", inputs.len())));
    }
    let p = LintentionParams::new(inputs[1].clone(), inputs[2].clone(), inputs[3].clone())?;
    Ok((&inputs[0], p))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn nhwc(n: usize, h: usize, w: usize, c: usize, data: Vec<f64>) -> Tensor {
        Tensor::new(&[("n", n), ("h", h), ("w", w), ("c", c)], data).unwrap()
    }

    fn eye(c: usize) -> Tensor {
        Tensor::from_fn(&[("c", c), ("d", c)], |i| if i % (c + 1) == 0 { 1.0 } else { 0.0 }).unwrap()
    }

    #[test]
    fn query_generator_examples() {
        let x = nhwc(1, 1, 1, 2, vec![1.0, 2.0]);
        let wq = Tensor::new(&[("c", 2), ("d", 2)], vec![1.0, 0.0, 1.0, 1.0]).unwrap();
        let p = LintentionParams::new(wq, Tensor::zeros(&[("c", 2), ("p", 1)]).unwrap(), eye(2)).unwrap();
        assert_eq!(query_gen(&x, &p).unwrap().data(), &[3.0, 2.0]);

        let p = LintentionParams::new(eye(2), Tensor::zeros(&[("c", 2), ("p", 1)]).unwrap(), eye(2)).unwrap();
        assert_eq!(query_gen(&x, &p).unwrap().data(), x.data());
        let z = LintentionParams::zeros(2, 3).unwrap();
        assert_eq!(query_gen(&x, &z).unwrap().data(), &[0.0, 0.0]);

        let bad = nhwc(1, 1, 1, 3, vec![0.0; 3]);
        assert!(matches!(query_gen(&bad, &z), Err(Error::Dimension { .. })));
    }

    #[test]
    fn key_generator_uniform_and_single_group() {
        let x = nhwc(1, 2, 2, 3, (0..12).map(|i| i as f64 * 0.1).collect());
        let q = nhwc(1, 2, 2, 3, (0..12).map(|i| (i as f64).sin()).collect());
        let pz = LintentionParams::zeros(3, 4).unwrap();
        let (l, k) = key_gen(&x, &q, &pz).unwrap();
        assert!(l.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        for p in 0..4 {
            for c in 0..3 {
                let total: f64 = (0..4).map(|px| q.data()[px * 3 + c]).sum();
                assert!((k.get(&[0, p, c]) - total / 4.0).abs() < 1e-14);
            }
        }

        let p1 = init_params(5, 3, 1).unwrap();
        let (l, k) = key_gen(&x, &q, &p1).unwrap();
        assert!(l.data().iter().all(|&v| v == 1.0));
        for c in 0..3 {
            let total: f64 = (0..4).map(|px| q.data()[px * 3 + c]).sum();
            assert!((k.get(&[0, 0, c]) - total).abs() < 1e-14);
        }
    }

    #[test]
    fn value_generator_examples() {
        let k = Tensor::new(&[("n", 1), ("p", 1), ("c", 2)], vec![1.0, -1.0]).unwrap();
        let wv = Tensor::new(&[("c", 2), ("d", 2)], vec![2.0, 0.0, 0.0, 3.0]).unwrap();
        let p = LintentionParams::new(eye(2), Tensor::zeros(&[("c", 2), ("p", 1)]).unwrap(), wv).unwrap();
        let v = value_gen(&k, &p).unwrap();
        assert_eq!(v.data(), &[2.0, -3.0]);
        assert_eq!(v.axis_names(), vec!["n", "p", "c"]);
    }

    #[test]
    fn attention_score_examples() {
        let q = nhwc(1, 1, 1, 4, vec![1.0, 0.0, 0.0, 0.0]);
        let k = Tensor::new(&[("n", 1), ("p", 2), ("c", 4)], vec![2.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let s = attention_scores(&q, &k).unwrap();
        let e = std::f64::consts::E;
        assert!((s.data()[0] - e / (e + 1.0)).abs() < 1e-15);
        assert!((s.data()[1] - 1.0 / (e + 1.0)).abs() < 1e-15);

        let q = nhwc(1, 2, 1, 1, vec![1.0, -4.0]);
        let k = Tensor::new(&[("n", 1), ("p", 2), ("c", 1)], vec![0.7, 0.7]).unwrap();
        assert!(attention_scores(&q, &k).unwrap().data().iter().all(|&v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn result_generator_one_hot_and_uniform() {
        let v = Tensor::new(&[("n", 1), ("p", 2), ("c", 2)], vec![1.0, 2.0, -3.0, 5.0]).unwrap();
        let one_hot = Tensor::new(&[("n", 1), ("h", 1), ("w", 2), ("p", 2)], vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        assert_eq!(result_gen(&one_hot, &v).unwrap().data(), &[-3.0, 5.0, -3.0, 5.0]);
        let uniform = Tensor::full(&[("n", 1), ("h", 1), ("w", 1), ("p", 2)], 0.5).unwrap();
        assert_eq!(result_gen(&uniform, &v).unwrap().data(), &[-1.0, 3.5]);
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let p = init_params(3, 4, 2).unwrap();
        let x = nhwc(2, 2, 3, 4, vec![0.0; 48]);
        let (y, t) = lintention_forward(&x, &p).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        assert!(t.scores.data().iter().all(|&v| (v - 0.5).abs() < 1e-15));
        // 2NHWP + 2NHWC + 2NPC with N=2, HW=6, C=4, P=2
        assert_eq!(t.scalar_count(), 48 + 96 + 32);
    }

    #[test]
    fn layer_with_zero_weights_is_plain_layer_norm() {
        let x = nhwc(1, 2, 2, 3, (0..12).map(|i| (i as f64 * 0.7).cos()).collect());
        let layer = LintentionLayerParams::new(LintentionParams::zeros(3, 2).unwrap(), vec![1.0; 3], vec![0.0; 3], 1e-5).unwrap();
        let y = lintention_layer_forward(&x, &layer).unwrap();
        let expect = layer_norm(&x, &[1.0; 3], &[0.0; 3], 1e-5).unwrap();
        assert!(y.max_abs_diff(&expect).unwrap() < 1e-15);

        let k = nhwc(1, 2, 2, 3, vec![0.4; 12]);
        assert!(lintention_layer_forward(&k, &layer).unwrap().data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a = init_params(1, 2, 2).unwrap();
        assert_eq!(a, init_params(1, 2, 2).unwrap());
        for t in [a.wq(), a.wk(), a.wv()] {
            assert!(t.data().iter().all(|v| v.abs() < 0.7072));
        }
        assert_ne!(a, init_params(2, 2, 2).unwrap());
        assert_eq!(init_params(0, 128, 16).unwrap().param_count(), 34_816);
        assert!(init_params(0, 0, 1).is_err());
    }

    #[test]
    fn layer_params_round_trip_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = init_layer_params(11, 4, 3).unwrap();
        p.save(dir.path()).unwrap();
        assert_eq!(LintentionLayerParams::load(dir.path()).unwrap(), p);
    }
}
