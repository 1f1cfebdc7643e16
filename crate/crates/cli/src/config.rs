//! Run configuration: one JSON file per run, schema-validated with unknown
//! keys rejected. `--set key=value` overrides nest with dotted paths and the
//! `CBNT_SEED` environment variable overrides the seed.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use cbnt_core::encoding::HashEncodingConfig;
use cbnt_core::geometry::{Aabb, ConeBeamGeometry, Vec3};
use cbnt_core::network::FieldModelConfig;
use cbnt_core::optim::TrainConfig;
use cbnt_core::volume::PhantomSpec;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometryConfig {
    pub sid_mm: f64,
    pub sdd_mm: f64,
    pub det_rows: usize,
    pub det_cols: usize,
    pub det_pitch_mm: f64,
    pub n_angles: usize,
    pub arc_degrees: f64,
    /// Samples per ray when forward-projecting phantoms.
    pub projection_samples: usize,
    /// Optional equally-spaced subset size written alongside full stacks.
    pub subset_projections: Option<usize>,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        GeometryConfig {
            sid_mm: 500.0,
            sdd_mm: 1000.0,
            det_rows: 64,
            det_cols: 64,
            det_pitch_mm: 4.0,
            n_angles: 60,
            arc_degrees: 205.0,
            projection_samples: 256,
            subset_projections: None,
        }
    }
}

impl GeometryConfig {
    pub fn build(&self, bbox: Aabb) -> cbnt_core::Result<ConeBeamGeometry> {
        ConeBeamGeometry::with_uniform_angles(
            self.sid_mm,
            self.sdd_mm,
            self.det_rows,
            self.det_cols,
            self.det_pitch_mm,
            self.n_angles,
            self.arc_degrees.to_radians(),
            bbox,
        )
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    pub dims: [usize; 3],
    pub spacing_mm: f64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// Full anatomy override; derived from dims/spacing when absent.
    pub spec: Option<PhantomSpec>,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            dims: [64, 64, 64],
            spacing_mm: 2.0,
            n_train: 20,
            n_val: 4,
            n_test: 4,
            spec: None,
        }
    }
}

impl PhantomConfig {
    pub fn spec(&self) -> PhantomSpec {
        self.spec
            .clone()
            .unwrap_or_else(|| PhantomSpec::with_grid(self.dims, self.spacing_mm))
    }

    pub fn bbox(&self) -> cbnt_core::Result<Aabb> {
        let half = [
            self.dims[0] as f64 * self.spacing_mm / 2.0,
            self.dims[1] as f64 * self.spacing_mm / 2.0,
            self.dims[2] as f64 * self.spacing_mm / 2.0,
        ];
        Aabb::new(
            Vec3::new(-half[0], -half[1], -half[2]),
            Vec3::new(half[0], half[1], half[2]),
        )
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    /// Simulated photon count; `null` disables the noisy stacks.
    pub photons: Option<f64>,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig { photons: Some(5e5) }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub shared_encoding: HashEncodingConfig,
    pub hidden_width: usize,
    pub n_hidden: usize,
    pub nmf_encoding: HashEncodingConfig,
    pub nmf_hidden_width: usize,
    pub nmf_n_hidden: usize,
    /// Encoding for from-scratch fits; the shared encoding when absent.
    pub scratch_encoding: Option<HashEncodingConfig>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        // Desk-scale sizes; `FieldModelConfig::full_default()` holds the
        // full-size architecture.
        ModelConfig {
            shared_encoding: HashEncodingConfig {
                levels: 6,
                feat_dim: 2,
                base_res: 4,
                growth: 2.0,
                table_size: 1 << 15,
            },
            hidden_width: 64,
            n_hidden: 2,
            nmf_encoding: HashEncodingConfig {
                levels: 4,
                feat_dim: 2,
                base_res: 4,
                growth: 2.0,
                table_size: 1 << 13,
            },
            nmf_hidden_width: 32,
            nmf_n_hidden: 2,
            scratch_encoding: None,
        }
    }
}

impl ModelConfig {
    pub fn field_model(&self) -> FieldModelConfig {
        FieldModelConfig {
            shared_encoding: self.shared_encoding,
            hidden_width: self.hidden_width,
            n_hidden: self.n_hidden,
            nmf_encoding: self.nmf_encoding,
            nmf_hidden_width: self.nmf_hidden_width,
            nmf_n_hidden: self.nmf_n_hidden,
        }
    }

    pub fn scratch_model(&self) -> FieldModelConfig {
        let mut m = self.field_model();
        if let Some(enc) = self.scratch_encoding {
            m.shared_encoding = enc;
        }
        m
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IterativeConfig {
    /// TV weights swept during grid search (0 = unregularized).
    pub tv_candidates: Vec<f64>,
    /// Iteration counts inspected during grid search.
    pub iter_candidates: Vec<usize>,
    /// Fixed settings when not grid searching.
    pub tv_weight: f64,
    pub n_iter: usize,
    pub tv_epsilon: f64,
    pub n_samples: usize,
    /// omega = omega_safety / sigma_max^2.
    pub omega_safety: f64,
    pub opnorm_iters: usize,
}

impl Default for IterativeConfig {
    fn default() -> Self {
        IterativeConfig {
            tv_candidates: vec![0.0, 0.003, 0.01, 0.03],
            iter_candidates: vec![30, 60, 100, 150],
            tv_weight: 0.01,
            n_iter: 100,
            tv_epsilon: 1e-3,
            n_samples: 96,
            omega_safety: 1.9,
            opnorm_iters: 12,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig { data_dir: "data".into(), out_dir: "out".into() }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub geometry: GeometryConfig,
    pub phantom: PhantomConfig,
    pub noise: NoiseConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub iterative: IterativeConfig,
    pub paths: PathsConfig,
}

impl RunConfig {
    /// Load from an optional file, apply `--set` overrides and the
    /// `CBNT_SEED` environment variable, and validate.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
        let mut value = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading config {p:?}"))?;
                serde_json::from_str(&text).with_context(|| format!("parsing config {p:?}"))?
            }
            None => serde_json::to_value(RunConfig::default())?,
        };
        for item in overrides {
            apply_override(&mut value, item)?;
        }
        let mut cfg: RunConfig =
            serde_json::from_value(value).context("config failed schema validation")?;
        if let Ok(seed) = std::env::var("CBNT_SEED") {
            cfg.seed = seed
                .parse()
                .with_context(|| format!("CBNT_SEED must be an unsigned integer, got {seed:?}"))?;
        }
        // One master seed drives every stream.
        cfg.train.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.phantom.spec().validate()?;
        let bbox = self.phantom.bbox()?;
        self.geometry.build(bbox)?;
        self.model.field_model().validate()?;
        self.train.validate()?;
        if self.geometry.projection_samples == 0 {
            bail!("geometry.projection_samples must be >= 1");
        }
        if let Some(m) = self.geometry.subset_projections {
            if m == 0 || m > self.geometry.n_angles {
                bail!(
                    "geometry.subset_projections must be in [1, n_angles], got {m}"
                );
            }
        }
        if let Some(p) = self.noise.photons {
            if p < 1.0 {
                bail!("noise.photons must be >= 1");
            }
        }
        Ok(())
    }

    pub fn bbox(&self) -> cbnt_core::Result<Aabb> {
        self.phantom.bbox()
    }
}

/// Apply one `key.path=value` override onto the raw JSON tree. Values parse
/// as JSON when possible and fall back to strings.
fn apply_override(root: &mut serde_json::Value, item: &str) -> Result<()> {
    let Some((key, raw)) = item.split_once('=') else {
        bail!("--set expects key=value, got {item:?}");
    };
    let parsed: serde_json::Value = serde_json::from_str(raw)
        .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .with_context(|| format!("config path {key:?} crosses a non-object"))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), parsed);
            return Ok(());
        }
        node = obj
            .entry(part.to_string())
            .or_insert_with(|| serde_json::Value::Object(Default::default()));
    }
    unreachable!()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_validates() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = r#"{"seed": 1, "geometry": {"sid_mm": 500.0, "nonsense": 3}}"#;
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, text).unwrap();
        assert!(RunConfig::load(Some(&p), &[]).is_err());
    }

    #[test]
    fn overrides_nest_and_parse() {
        let cfg = RunConfig::load(
            None,
            &[
                "seed=9".into(),
                "geometry.n_angles=12".into(),
                "noise.photons=null".into(),
                "train.batch_rays=64".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.geometry.n_angles, 12);
        assert_eq!(cfg.noise.photons, None);
        assert_eq!(cfg.train.batch_rays, 64);
        assert_eq!(cfg.train.seed, 9, "train seed follows the master seed");
    }

    #[test]
    fn bad_override_paths_error() {
        assert!(RunConfig::load(None, &["no_equals_sign".into()]).is_err());
        assert!(RunConfig::load(None, &["seed.too.deep=1".into()]).is_err());
    }
}
