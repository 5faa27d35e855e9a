//! Conditioned vector-field network: a small UNet over the channel
//! concatenation of the flowing state, the clean image and (optionally) the
//! completion conditioning, with a sinusoidal time embedding injected into
//! every residual block.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Element, Graph, Tensor, TensorError, Var};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum NetworkError {
    #[error("invalid network config: {0}")]
    Config(String),
    #[error("time {0} outside [0, 1]")]
    OutOfRangeT(f64),
    #[error("parameter table does not match the network: {0}")]
    ParamMismatch(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Network hyper-parameters.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UNetConfig {
    pub base_width: usize,
    /// Number of 2x downsamplings.
    pub depth_levels: usize,
    pub state_channels: usize,
    pub cond_channels: usize,
    /// Extra conditioning channels appended after the image (0 or 2).
    pub completion_channels: usize,
    pub time_embed_dim: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            base_width: 16,
            depth_levels: 2,
            state_channels: 1,
            cond_channels: 1,
            completion_channels: 0,
            time_embed_dim: 64,
        }
    }
}

impl UNetConfig {
    pub fn in_channels(&self) -> usize {
        self.state_channels + self.cond_channels + self.completion_channels
    }

    pub fn out_channels(&self) -> usize {
        self.state_channels
    }

    /// Channel width of resolution level `level` (0 = full resolution).
    pub fn width(&self, level: usize) -> usize {
        if level == 0 {
            self.base_width
        } else {
            2 * self.base_width
        }
    }

    pub fn validate(&self) -> Result<(), NetworkError> {
        if self.base_width == 0 || self.state_channels == 0 || self.cond_channels == 0 {
            return Err(NetworkError::Config("widths and channel counts must be positive".into()));
        }
        if self.in_channels() < 2 {
            return Err(NetworkError::Config("need at least two input channels".into()));
        }
        if self.time_embed_dim == 0 || !self.time_embed_dim.is_multiple_of(2) {
            return Err(NetworkError::Config(format!(
                "time_embed_dim must be even and positive, got {}",
                self.time_embed_dim
            )));
        }
        Ok(())
    }

    /// Check that an `h x w` input fits the downsampling depth.
    pub fn check_spatial(&self, h: usize, w: usize) -> Result<(), NetworkError> {
        let f = 1usize << self.depth_levels;
        if !h.is_multiple_of(f) || !w.is_multiple_of(f) || h == 0 || w == 0 {
            return Err(NetworkError::Config(format!(
                "spatial size {h}x{w} not divisible by {f}"
            )));
        }
        Ok(())
    }
}

/// Sinusoidal embedding of `t` in `[0, 1]`.
///
/// Coordinates come in `(sin, cos)` pairs with angle `1000 t w_k`,
/// `w_k = 10000^(-2k/dim)`.
pub fn time_embedding(t: f64, dim: usize) -> Result<Vec<f64>, NetworkError> {
    if !(0.0..=1.0).contains(&t) {
        return Err(NetworkError::OutOfRangeT(t));
    }
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(NetworkError::Config(format!("embedding dim {dim} must be even")));
    }
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for k in 0..half {
        let angle = 1000.0 * t * time_frequency(k, dim);
        out.push(angle.sin());
        out.push(angle.cos());
    }
    Ok(out)
}

/// Angular frequency `w_k` of pair `k`.
pub fn time_frequency(k: usize, dim: usize) -> f64 {
    10000f64.powf(-2.0 * k as f64 / dim as f64)
}

/// Ordered, named parameter table.
#[derive(Clone, Debug, PartialEq)]
pub struct Params<T> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Element> Params<T> {
    pub fn new(entries: Vec<(String, Tensor<T>)>) -> Self {
        Self { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn entries(&self) -> &[(String, Tensor<T>)] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [(String, Tensor<T>)] {
        &mut self.entries
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn numel(&self) -> usize {
        self.tensors().map(Tensor::numel).sum()
    }

    pub fn cast<U: Element>(&self) -> Params<U> {
        Params {
            entries: self.entries.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
        }
    }

    /// Bind every tensor as a trainable leaf.
    pub fn bind(&self, graph: &mut Graph<T>) -> Vec<Var> {
        self.tensors().map(|t| graph.param(t.clone())).collect()
    }

    /// Bind every tensor as a constant (inference).
    pub fn bind_frozen(&self, graph: &mut Graph<T>) -> Vec<Var> {
        self.tensors().map(|t| graph.constant(t.clone())).collect()
    }

    pub fn to_vec(&self) -> Vec<Tensor<T>> {
        self.tensors().cloned().collect()
    }

    /// Replace tensor values in order, keeping names.
    pub fn with_tensors(&self, tensors: Vec<Tensor<T>>) -> Self {
        assert_eq!(tensors.len(), self.entries.len());
        Self {
            entries: self
                .entries
                .iter()
                .zip(tensors)
                .map(|((n, _), t)| (n.clone(), t))
                .collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Init {
    FanIn,
    Zero,
}

/// The vector-field UNet. Holds the parameter layout, not the values.
#[derive(Clone, Debug)]
pub struct UNet {
    config: UNetConfig,
    layout: Vec<(String, Vec<usize>, Init)>,
    index: HashMap<String, usize>,
}

const FINAL_CONV: &str = "out.conv.weight";
const FINAL_BIAS: &str = "out.conv.bias";
pub const STEM_WEIGHT: &str = "stem.weight";

impl UNet {
    pub fn new(config: UNetConfig) -> Result<Self, NetworkError> {
        config.validate()?;
        let d = config.time_embed_dim;
        let mut layout: Vec<(String, Vec<usize>, Init)> = vec![
            (STEM_WEIGHT.into(), vec![config.base_width, config.in_channels(), 3, 3], Init::FanIn),
            ("stem.bias".into(), vec![config.base_width], Init::Zero),
        ];
        let res_block = |layout: &mut Vec<(String, Vec<usize>, Init)>, name: &str, cin: usize, cout: usize| {
            for (part, ci) in [("conv1", cin), ("conv2", cout)] {
                layout.push((format!("{name}.{part}.weight"), vec![cout, ci, 3, 3], Init::FanIn));
                layout.push((format!("{name}.{part}.bias"), vec![cout], Init::Zero));
            }
            layout.push((format!("{name}.temb.weight"), vec![cout, d], Init::FanIn));
            layout.push((format!("{name}.temb.bias"), vec![cout], Init::Zero));
            if cin != cout {
                layout.push((format!("{name}.skip.weight"), vec![cout, cin, 1, 1], Init::FanIn));
                layout.push((format!("{name}.skip.bias"), vec![cout], Init::Zero));
            }
        };
        for (name, shape) in [("time.fc1", [d, d]), ("time.fc2", [d, d])] {
            layout.push((format!("{name}.weight"), shape.to_vec(), Init::FanIn));
            layout.push((format!("{name}.bias"), vec![d], Init::Zero));
        }
        let levels = config.depth_levels;
        let mut cin = config.base_width;
        for l in 0..levels {
            res_block(&mut layout, &format!("down{l}"), cin, config.width(l));
            cin = config.width(l);
        }
        let mid = config.width(levels);
        res_block(&mut layout, "mid", cin, mid);
        let mut below = mid;
        for l in (0..levels).rev() {
            res_block(&mut layout, &format!("up{l}"), below + config.width(l), config.width(l));
            below = config.width(l);
        }
        layout.push((FINAL_CONV.into(), vec![config.out_channels(), below, 3, 3], Init::Zero));
        layout.push((FINAL_BIAS.into(), vec![config.out_channels()], Init::Zero));

        let index = layout
            .iter()
            .enumerate()
            .map(|(i, (n, _, _))| (n.clone(), i))
            .collect();
        Ok(Self {
            config,
            layout,
            index,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.layout.iter().map(|(n, _, _)| n.as_str())
    }

    /// Deterministic initialisation: zero output conv and biases, fan-in
    /// scaled uniform weights elsewhere.
    pub fn init_params<T: Element>(&self, seed: u64) -> Params<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let entries = self
            .layout
            .iter()
            .map(|(name, shape, init)| {
                let t = match init {
                    Init::Zero => Tensor::zeros(shape),
                    Init::FanIn => {
                        let fan_in: usize = shape[1..].iter().product();
                        let bound = (3.0 / fan_in as f64).sqrt();
                        let n = shape.iter().product();
                        let data = (0..n).map(|_| T::lit(rng.random_range(-bound..bound))).collect();
                        Tensor::new(shape.clone(), data).expect("layout shape")
                    }
                };
                (name.clone(), t)
            })
            .collect();
        Params::new(entries)
    }

    /// Verify a parameter table has this network's names and shapes.
    pub fn check_params<T: Element>(&self, params: &Params<T>) -> Result<(), NetworkError> {
        if params.len() != self.layout.len() {
            return Err(NetworkError::ParamMismatch(format!(
                "expected {} tensors, got {}",
                self.layout.len(),
                params.len()
            )));
        }
        for ((name, shape, _), (pn, pt)) in self.layout.iter().zip(params.entries()) {
            if name != pn || shape.as_slice() != pt.shape() {
                return Err(NetworkError::ParamMismatch(format!(
                    "expected {name} {shape:?}, got {pn} {:?}",
                    pt.shape()
                )));
            }
        }
        Ok(())
    }

    fn p(&self, vars: &[Var], name: &str) -> Var {
        vars[self.index[name]]
    }

    fn conv(&self, g: &mut Graph<impl Element>, vars: &[Var], name: &str, x: Var) -> Result<Var, TensorError> {
        let w = self.p(vars, &format!("{name}.weight"));
        let b = self.p(vars, &format!("{name}.bias"));
        g.conv2d(x, w, b)
    }

    fn linear(&self, g: &mut Graph<impl Element>, vars: &[Var], name: &str, x: Var) -> Result<Var, TensorError> {
        let w = self.p(vars, &format!("{name}.weight"));
        let b = self.p(vars, &format!("{name}.bias"));
        g.linear(x, w, b)
    }

    fn res_block<T: Element>(
        &self,
        g: &mut Graph<T>,
        vars: &[Var],
        name: &str,
        x: Var,
        temb: Var,
    ) -> Result<Var, TensorError> {
        let h = g.silu(x)?;
        let h = self.conv(g, vars, &format!("{name}.conv1"), h)?;
        let proj = self.linear(g, vars, &format!("{name}.temb"), temb)?;
        let h = g.add_channel_bias(h, proj)?;
        let h = g.silu(h)?;
        let h = self.conv(g, vars, &format!("{name}.conv2"), h)?;
        let skip = if self.index.contains_key(&format!("{name}.skip.weight")) {
            self.conv(g, vars, &format!("{name}.skip"), x)?
        } else {
            x
        };
        g.add(skip, h)
    }

    /// Evaluate `v(t, x_t; cond[, extra])` for a batch.
    ///
    /// `times` holds one `t` per batch element; `vars` are the parameter
    /// leaves in layout order (see [`Params::bind`]).
    pub fn forward<T: Element>(
        &self,
        g: &mut Graph<T>,
        vars: &[Var],
        times: &[f64],
        x_t: Var,
        cond: Var,
        extra: Option<Var>,
    ) -> Result<Var, NetworkError> {
        if vars.len() != self.layout.len() {
            return Err(NetworkError::ParamMismatch(format!(
                "expected {} bound tensors, got {}",
                self.layout.len(),
                vars.len()
            )));
        }
        let cfg = &self.config;
        let shape = g.value(x_t).shape().to_vec();
        let (n, h, w) = match shape.as_slice() {
            &[n, c, h, w] if c == cfg.state_channels => (n, h, w),
            s => {
                return Err(NetworkError::Tensor(TensorError::ShapeMismatch(format!(
                    "state {s:?}, expected [N, {}, H, W]",
                    cfg.state_channels
                ))))
            }
        };
        cfg.check_spatial(h, w)?;
        let expect = |g: &Graph<T>, v: Var, c: usize, what: &str| -> Result<(), NetworkError> {
            if g.value(v).shape() != [n, c, h, w] {
                return Err(NetworkError::Tensor(TensorError::ShapeMismatch(format!(
                    "{what} {:?}, expected [{n}, {c}, {h}, {w}]",
                    g.value(v).shape()
                ))));
            }
            Ok(())
        };
        expect(g, cond, cfg.cond_channels, "conditioning")?;
        let mut inputs = vec![x_t, cond];
        match (extra, cfg.completion_channels) {
            (None, 0) => {}
            (Some(e), c) if c > 0 => {
                expect(g, e, c, "completion conditioning")?;
                inputs.push(e);
            }
            _ => {
                return Err(NetworkError::Config(format!(
                    "network expects {} completion channels",
                    cfg.completion_channels
                )))
            }
        }
        if times.len() != n {
            return Err(NetworkError::Config(format!("{} times for batch of {n}", times.len())));
        }

        let d = cfg.time_embed_dim;
        let mut emb = Vec::with_capacity(n * d);
        for &t in times {
            emb.extend(time_embedding(t, d)?.into_iter().map(T::lit));
        }
        let emb = g.constant(Tensor::new(vec![n, d], emb)?);
        let temb = self.linear(g, vars, "time.fc1", emb)?;
        let temb = g.silu(temb)?;
        let temb = self.linear(g, vars, "time.fc2", temb)?;
        let temb = g.silu(temb)?;

        let x = g.concat_channels(&inputs)?;
        let mut hcur = self.conv(g, vars, "stem", x)?;
        let mut skips = Vec::with_capacity(cfg.depth_levels);
        for l in 0..cfg.depth_levels {
            hcur = self.res_block(g, vars, &format!("down{l}"), hcur, temb)?;
            skips.push(hcur);
            hcur = g.avgpool2(hcur)?;
        }
        hcur = self.res_block(g, vars, "mid", hcur, temb)?;
        for l in (0..cfg.depth_levels).rev() {
            hcur = g.upsample_nearest2(hcur)?;
            hcur = g.concat_channels(&[hcur, skips[l]])?;
            hcur = self.res_block(g, vars, &format!("up{l}"), hcur, temb)?;
        }
        let hcur = g.silu(hcur)?;
        Ok(self.conv(g, vars, "out.conv", hcur)?)
    }

    /// Inference-only forward over frozen parameters.
    pub fn predict<T: Element>(
        &self,
        params: &Params<T>,
        times: &[f64],
        x_t: &Tensor<T>,
        cond: &Tensor<T>,
        extra: Option<&Tensor<T>>,
    ) -> Result<Tensor<T>, NetworkError> {
        let mut g = Graph::new();
        let vars = params.bind_frozen(&mut g);
        let x = g.constant(x_t.clone());
        let c = g.constant(cond.clone());
        let e = extra.map(|e| g.constant(e.clone()));
        let out = self.forward(&mut g, &vars, times, x, c, e)?;
        Ok(g.value(out).clone())
    }

    /// Extend the stem convolution with `extra` zero-initialised input
    /// channels. The inflated network reproduces the original outputs exactly
    /// until the new weights are trained.
    pub fn inflate<T: Element>(&self, params: &Params<T>, extra: usize) -> Result<(UNet, Params<T>), NetworkError> {
        self.check_params(params)?;
        let mut cfg = self.config.clone();
        cfg.completion_channels += extra;
        let net = UNet::new(cfg)?;
        let old = params
            .get(STEM_WEIGHT)
            .ok_or_else(|| NetworkError::ParamMismatch("missing stem".into()))?;
        let (cout, cin, k) = (old.dim(0), old.dim(1), old.dim(2));
        let cnew = cin + extra;
        let mut data = vec![T::zero(); cout * cnew * k * k];
        for co in 0..cout {
            let src = &old.data()[co * cin * k * k..(co + 1) * cin * k * k];
            data[co * cnew * k * k..co * cnew * k * k + cin * k * k].copy_from_slice(src);
        }
        let mut inflated = params.clone();
        *inflated.get_mut(STEM_WEIGHT).expect("stem") = Tensor::new(vec![cout, cnew, k, k], data)?;
        net.check_params(&inflated)?;
        Ok((net, inflated))
    }
}
