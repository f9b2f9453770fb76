use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::grid::{ancillary_channel_names, bilinear_resample, GeoGrid, GridStack, Ratio};
use crate::nn::{Graph, ParamStore, Scalar, Tensor, Var};
use crate::preprocess::NormStats;

use super::blocks::{conv, gca_forward, mfca_forward, rdam_forward};
use super::{AmcnConfig, NetError, Result};

/// Name, shape and initialization scale of one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    /// Uniform half-width multiplier on `sqrt(3 / fan_in)`; 0 for biases.
    pub gain: f64,
}

impl ParamSpec {
    fn fan_in(&self) -> usize {
        self.shape[1..].iter().product::<usize>().max(1)
    }
}

struct Layout(Vec<ParamSpec>);

impl Layout {
    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, gain: f64) {
        self.0.push(ParamSpec {
            name: format!("{name}.w"),
            shape: vec![cout, cin, k, k],
            gain,
        });
        self.0.push(ParamSpec {
            name: format!("{name}.b"),
            shape: vec![cout],
            gain: 0.0,
        });
    }

    fn croa(&mut self, prefix: &str, c: usize, k: usize) {
        for part in ["hasa_p", "hasa_gate", "lpca_a", "lpca_gate"] {
            self.conv(&format!("{prefix}.{part}"), c, c, k, 1.0);
        }
    }
}

const RELU_GAIN: f64 = std::f64::consts::SQRT_2;
const RECON_GAIN: f64 = 0.1;

/// Every parameter the configuration needs, in a fixed order.
pub fn param_layout(cfg: &AmcnConfig) -> Result<Vec<ParamSpec>> {
    cfg.validate()?;
    let (c, a, k, gr) = (cfg.base_channels, cfg.n_ancillary, cfg.kernel, cfg.rdb_growth);
    let mut l = Layout(Vec::new());
    l.conv("embed.p", 1, c, k, 1.0);
    if cfg.use_gca || !cfg.use_mfca {
        l.conv("embed.a", a, c, k, 1.0);
    }
    if cfg.use_gca {
        l.croa("gca", c, k);
    }
    if cfg.use_mfca {
        for i in 0..a {
            l.conv(&format!("embed.f{i}"), 1, c, k, 1.0);
        }
        for i in 0..a {
            l.croa(&format!("mfca.{i}"), c, k);
        }
        l.conv("mfca.proj", a * c, c, 1, 1.0);
    }
    l.conv("cascade", cfg.cascade_channels(), c, 1, 1.0);
    for lv in 0..cfg.n_levels {
        let rdb = format!("rdam.{lv}.rdb");
        for j in 0..cfg.rdb_layers {
            l.conv(&format!("{rdb}.c{j}"), c + j * gr, gr, k, RELU_GAIN);
        }
        l.conv(&format!("{rdb}.fuse"), c + cfg.rdb_layers * gr, c, 1, 1.0);
        let rab = format!("rdam.{lv}.rab");
        l.0.push(ParamSpec {
            name: format!("{rab}.fc.w"),
            shape: vec![c, c],
            gain: 1.0,
        });
        l.0.push(ParamSpec {
            name: format!("{rab}.fc.b"),
            shape: vec![c],
            gain: 0.0,
        });
        l.conv(&format!("{rab}.sa"), c, 1, k, 1.0);
        l.conv(&format!("{rab}.out"), c, c, k, 1.0);
    }
    l.conv("rdam.fuse", cfg.n_levels * c, c, 1, 1.0);
    l.conv("recon", c, 1, k, RECON_GAIN);
    Ok(l.0)
}

/// Seeded uniform initialization scaled by fan-in; biases start at zero.
pub fn init_params(cfg: &AmcnConfig, seed: u64) -> Result<ParamStore<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for spec in param_layout(cfg)? {
        let n: usize = spec.shape.iter().product();
        let data = if spec.gain == 0.0 {
            vec![0.0; n]
        } else {
            let a = spec.gain * (3.0 / spec.fan_in() as f64).sqrt();
            (0..n).map(|_| rng.gen_range(-a..a) as f32).collect()
        };
        store.insert(spec.name, spec.shape, data)?;
    }
    Ok(store)
}

/// Handles of one forward pass. `up` and `out` are in precipitation units,
/// `xi` is the residual in normalized units.
#[derive(Debug, Clone, Copy)]
pub struct Forward {
    pub up: Var,
    pub xi: Var,
    pub out: Var,
}

/// Records the network on `g`.
///
/// `lr` is the coarse precipitation `(b, 1, h, w)` in physical units and
/// `ancillary` the normalized factors `(b, n_ancillary, h*r, w*r)`; `norm`
/// holds the precipitation channel first and then the factors.
pub fn amcn_forward<T: Scalar>(
    g: &mut Graph<T>,
    cfg: &AmcnConfig,
    p: &ParamStore<T>,
    norm: &NormStats,
    lr: &Tensor<T>,
    ancillary: &Tensor<T>,
) -> Result<Forward> {
    cfg.validate()?;
    let (Some((b, one, h, w)), Some((b2, na, hh, ww))) = (lr.dims4(), ancillary.dims4()) else {
        return Err(NetError::Input("inputs must be 4-D".into()));
    };
    let r = cfg.scale;
    if one != 1 || b2 != b || na != cfg.n_ancillary || hh != h * r || ww != w * r {
        return Err(NetError::Input(format!(
            "precipitation {:?} and ancillary {:?} do not match factor {r} with {} factors",
            lr.shape(),
            ancillary.shape(),
            cfg.n_ancillary
        )));
    }
    if norm.len() != 1 + cfg.n_ancillary {
        return Err(NetError::Input(format!(
            "norm stats cover {} channels, need {}",
            norm.len(),
            1 + cfg.n_ancillary
        )));
    }
    let ps = norm.get(0);
    let lr_v = g.input(lr.clone())?;
    let up = g.resize(lr_v, Ratio::up(r as u32))?;
    let (mean, inv_std) = (T::lit(ps.mean), T::lit(1.0 / ps.std));
    let xp: Vec<T> = g.value(up).data().iter().map(|&v| (v - mean) * inv_std).collect();
    let xp = g.input(Tensor::new(g.value(up).shape().to_vec(), xp)?)?;
    let anc = g.input(ancillary.clone())?;

    let fp = conv(g, p, "embed.p", xp)?;
    let joint = if cfg.use_gca || !cfg.use_mfca {
        Some(conv(g, p, "embed.a", anc)?)
    } else {
        None
    };
    let mut pieces = Vec::with_capacity(2);
    if cfg.use_gca {
        pieces.push(gca_forward(g, p, fp, joint.unwrap())?);
    }
    if cfg.use_mfca {
        let factors = (0..cfg.n_ancillary)
            .map(|i| {
                let f = g.slice_channels(anc, i, 1)?;
                conv(g, p, &format!("embed.f{i}"), f)
            })
            .collect::<Result<Vec<_>>>()?;
        pieces.push(mfca_forward(g, p, fp, &factors)?);
    }
    if pieces.is_empty() {
        pieces.push(fp);
        pieces.push(joint.unwrap());
    }
    let cat = g.concat(&pieces)?;
    let fused = conv(g, p, "cascade", cat)?;
    let deep = rdam_forward(g, p, fused)?;
    let xi = conv(g, p, "recon", deep)?;
    let scaled = g.scale(xi, T::lit(ps.std))?;
    let out = g.add(up, scaled)?;
    Ok(Forward { up, xi, out })
}

/// Configuration, trained parameters and the normalization they expect.
#[derive(Debug, Clone, PartialEq)]
pub struct AmcnModel {
    pub config: AmcnConfig,
    pub params: ParamStore<f32>,
    pub norm: NormStats,
}

impl AmcnModel {
    pub fn new(config: AmcnConfig, norm: NormStats, seed: u64) -> Result<Self> {
        let params = init_params(&config, seed)?;
        let model = Self { config, params, norm };
        model.check()?;
        Ok(model)
    }

    /// Parameter names and shapes must be exactly the configuration's layout.
    pub fn check(&self) -> Result<()> {
        let layout = param_layout(&self.config)?;
        if layout.len() != self.params.len()
            || layout
                .iter()
                .zip(self.params.iter())
                .any(|(s, p)| s.name != p.name || s.shape != p.shape)
        {
            return Err(NetError::Config("parameters do not match the configuration".into()));
        }
        if self.norm.len() != 1 + self.config.n_ancillary {
            return Err(NetError::Config(format!(
                "norm stats cover {} channels, need {}",
                self.norm.len(),
                1 + self.config.n_ancillary
            )));
        }
        Ok(())
    }

    /// Sets the reconstruction convolution to zero, so the network output is
    /// exactly the bilinear upsampling.
    pub fn zero_reconstruction(&mut self) {
        for name in ["recon.w", "recon.b"] {
            if let Ok(p) = self.params.by_name_mut(name) {
                p.data.iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    /// Normalized ancillary tensor `(1, n, H, W)` with nodata set to the
    /// channel mean (zero after normalization).
    pub fn ancillary_tensor(&self, ancillary: &GridStack) -> Result<Tensor<f32>> {
        let names = ancillary_channel_names();
        if ancillary.len() != self.config.n_ancillary {
            return Err(NetError::Input(format!(
                "expected {} ancillary channels, got {}",
                self.config.n_ancillary,
                ancillary.len()
            )));
        }
        if self.config.n_ancillary == names.len() {
            ancillary.ensure_order(&names)?;
        }
        let (nr, nc) = (ancillary.nrows(), ancillary.ncols());
        let mut data = Vec::with_capacity(ancillary.len() * nr * nc);
        for (i, ch) in ancillary.channels().iter().enumerate() {
            let z = self.norm.apply_channel(ch, i + 1)?;
            data.extend(z.values().iter().map(|&v| if z.is_nodata(v) { 0.0 } else { v }));
        }
        Ok(Tensor::new(vec![1, ancillary.len(), nr, nc], data)?)
    }

    /// Downscales one coarse precipitation field: the raster bilinear
    /// upsampling plus the denormalized residual. Pixels whose bilinear
    /// stencil touches coarse nodata, or where any factor is nodata, are
    /// nodata in the result.
    pub fn predict(&self, lr: &GeoGrid, ancillary: &GridStack) -> Result<GeoGrid> {
        self.check()?;
        let r = self.config.scale;
        let up = bilinear_resample(lr, Ratio::up(r as u32))?;
        let template = ancillary.template();
        if !up.same_grid(template) {
            return Err(NetError::Input(format!(
                "coarse grid {}x{} at cell {} does not upsample by {r} onto the {}x{} ancillary grid",
                lr.nrows(),
                lr.ncols(),
                lr.cell_size(),
                template.nrows(),
                template.ncols()
            )));
        }
        let fill = {
            let (n, s) = lr.valid_values().fold((0usize, 0f64), |(n, s), v| (n + 1, s + v));
            if n == 0 {
                return Err(NetError::Input("coarse precipitation is all nodata".into()));
            }
            (s / n as f64) as f32
        };
        let lr_vals: Vec<f32> = lr
            .values()
            .iter()
            .map(|&v| if lr.is_nodata(v) { fill } else { v })
            .collect();
        let lr_t = Tensor::new(vec![1, 1, lr.nrows(), lr.ncols()], lr_vals)?;
        let anc_t = self.ancillary_tensor(ancillary)?;
        let mut g = Graph::new();
        let fwd = amcn_forward(&mut g, &self.config, &self.params, &self.norm, &lr_t, &anc_t)?;
        let std = self.norm.get(0).std as f32;
        let out = g
            .value(fwd.xi)
            .data()
            .iter()
            .zip(up.values())
            .enumerate()
            .map(|(i, (&xi, &u))| {
                let masked =
                    up.is_nodata(u) || ancillary.channels().iter().any(|ch| ch.is_nodata(ch.values()[i]));
                if masked {
                    up.nodata()
                } else {
                    u + xi * std
                }
            })
            .collect();
        Ok(up.with_values(out)?)
    }
}
