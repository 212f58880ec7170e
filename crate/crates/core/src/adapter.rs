//! Every trainable parameter of the system in one container, with a flat
//! view for the optimizer and the gradient checker, and on-disk persistence.

use std::fs;
use std::ops::Range;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::agents::{
    neu_init_concepts, AblationFlags, Ablation, ContextIntegrator, CoordinatorParams, LinguisticUnitParams,
    NameTable, VisualUnitParams,
};
use crate::encoders::FrozenEncoders;
use crate::error::{Error, Result};

pub const ADAPTER_JSON: &str = "adapter.json";
pub const ADAPTER_F32: &str = "adapter.f32";
pub const ADAPTER_FORMAT_VERSION: u32 = 1;

/// Hyperparameters that shape the adapter but are not trained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterConfig {
    pub beta: f64,
    pub lambda: f64,
    pub tau_lo: f64,
    pub tau_hi: f64,
    pub n_c: usize,
    /// Hidden width of both small MLPs; 0 means `d_embed`.
    pub hidden: usize,
    /// Initial bias of the difficulty head, so `sigmoid(b2)` is the prior score.
    pub difficulty_bias: f64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            beta: 0.5,
            lambda: 0.7,
            tau_lo: 0.33,
            tau_hi: 0.66,
            n_c: 2,
            hidden: 0,
            difficulty_bias: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterParams {
    pub visual: VisualUnitParams,
    pub linguistic: LinguisticUnitParams,
    pub names: NameTable,
    pub coordinator: CoordinatorParams,
    /// Classifier over the OOD training classes, one row per class.
    pub head: DMatrix<f64>,
    /// Visual context from the last training round, reused by the
    /// linguistic unit at evaluation time.
    pub eval_context: Option<DVector<f64>>,
}

/// Location of one named parameter group inside the flat vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupSpan {
    pub name: String,
    pub range: Range<usize>,
    /// Weight decay applies to weight matrices only.
    pub decay: bool,
}

fn slices(p: &AdapterParams) -> Vec<(String, &[f64], bool)> {
    let mut out: Vec<(String, &[f64], bool)> = vec![
        ("visual.theta1".into(), p.visual.theta1.as_slice(), true),
        ("visual.b1".into(), p.visual.b1.as_slice(), false),
        ("visual.theta2".into(), p.visual.theta2.as_slice(), true),
        ("visual.b2".into(), std::slice::from_ref(&p.visual.b2), false),
    ];
    match &p.linguistic.integrator {
        ContextIntegrator::Mlp { theta3, b3, theta4, b4 } => {
            out.push(("ctx.theta3".into(), theta3.as_slice(), true));
            out.push(("ctx.b3".into(), b3.as_slice(), false));
            out.push(("ctx.theta4".into(), theta4.as_slice(), true));
            out.push(("ctx.b4".into(), b4.as_slice(), false));
        }
        ContextIntegrator::Linear { proj, bias } => {
            out.push(("ctx.proj".into(), proj.as_slice(), true));
            out.push(("ctx.bias".into(), bias.as_slice(), false));
        }
    }
    for (c, m) in p.names.concepts.iter().zip(&p.names.vectors) {
        out.push((format!("names.{c}"), m.as_slice(), false));
    }
    out.push(("coord.kappa_param".into(), std::slice::from_ref(&p.coordinator.kappa_param), false));
    out.push(("coord.w_con_param".into(), std::slice::from_ref(&p.coordinator.w_con_param), false));
    out.push(("coord.w_cls_param".into(), std::slice::from_ref(&p.coordinator.w_cls_param), false));
    out.push(("head.theta_cls".into(), p.head.as_slice(), true));
    out
}

fn slices_mut(p: &mut AdapterParams) -> Vec<&mut [f64]> {
    let mut out: Vec<&mut [f64]> = vec![
        p.visual.theta1.as_mut_slice(),
        p.visual.b1.as_mut_slice(),
        p.visual.theta2.as_mut_slice(),
        std::slice::from_mut(&mut p.visual.b2),
    ];
    match &mut p.linguistic.integrator {
        ContextIntegrator::Mlp { theta3, b3, theta4, b4 } => {
            out.push(theta3.as_mut_slice());
            out.push(b3.as_mut_slice());
            out.push(theta4.as_mut_slice());
            out.push(b4.as_mut_slice());
        }
        ContextIntegrator::Linear { proj, bias } => {
            out.push(proj.as_mut_slice());
            out.push(bias.as_mut_slice());
        }
    }
    for m in &mut p.names.vectors {
        out.push(m.as_mut_slice());
    }
    out.push(std::slice::from_mut(&mut p.coordinator.kappa_param));
    out.push(std::slice::from_mut(&mut p.coordinator.w_con_param));
    out.push(std::slice::from_mut(&mut p.coordinator.w_cls_param));
    out.push(p.head.as_mut_slice());
    out
}

impl AdapterParams {
    /// Fresh parameters for the given OOD concepts.
    pub fn init(
        encoders: &FrozenEncoders,
        ood_names: &[String],
        cfg: &AdapterConfig,
        flags: &AblationFlags,
        seed: u64,
    ) -> Result<Self> {
        let d = encoders.d_embed();
        let hidden = if cfg.hidden == 0 { d } else { cfg.hidden };
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xADA9_7E45);
        let mut visual = VisualUnitParams::init(d, hidden, cfg.beta, cfg.difficulty_bias, &mut rng);
        visual.tau_lo = cfg.tau_lo;
        visual.tau_hi = cfg.tau_hi;
        visual.validate()?;
        let integrator = if flags.has(Ablation::SimpleConcat) {
            ContextIntegrator::linear(d)
        } else {
            ContextIntegrator::mlp(d, hidden, &mut rng)
        };
        let linguistic = LinguisticUnitParams {
            lambda: cfg.lambda,
            integrator,
        };
        linguistic.validate()?;
        let names = neu_init_concepts(ood_names, cfg.n_c, encoders.vocab.unk(), seed)?;
        Ok(Self {
            visual,
            linguistic,
            names,
            coordinator: CoordinatorParams::default(),
            head: DMatrix::zeros(ood_names.len(), d),
            eval_context: None,
        })
    }

    pub fn groups(&self) -> Vec<GroupSpan> {
        let mut start = 0;
        slices(self)
            .into_iter()
            .map(|(name, s, decay)| {
                let range = start..start + s.len();
                start = range.end;
                GroupSpan { name, range, decay }
            })
            .collect()
    }

    pub fn n_trainable(&self) -> usize {
        slices(self).iter().map(|(_, s, _)| s.len()).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        slices(self).into_iter().flat_map(|(_, s, _)| s.iter().copied()).collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        let n = self.n_trainable();
        if flat.len() != n {
            return Err(Error::DimensionMismatch {
                context: "flat adapter parameters",
                expected: n,
                actual: flat.len(),
            });
        }
        let mut it = flat.iter();
        for s in slices_mut(self) {
            for (dst, src) in s.iter_mut().zip(it.by_ref()) {
                *dst = *src;
            }
        }
        Ok(())
    }

    pub fn from_flat_like(&self, flat: &[f64]) -> Result<Self> {
        let mut p = self.clone();
        p.set_flat(flat)?;
        Ok(p)
    }

    /// SHA-256 over the trainable values and the evaluation context, in
    /// group order, as little-endian f64.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for v in self.to_flat() {
            h.update(v.to_le_bytes());
        }
        if let Some(c) = &self.eval_context {
            for v in c.iter() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Writes `adapter.json` (exact values and metadata) and `adapter.f32`
    /// (the flat trainable vector as little-endian f32, for external tools).
    pub fn save(&self, dir: &Path, backbone_hash: &str) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let bytes: Vec<u8> = self
            .to_flat()
            .into_iter()
            .flat_map(|v| (v as f32).to_le_bytes())
            .collect();
        let f32_path = dir.join(ADAPTER_F32);
        fs::write(&f32_path, &bytes).map_err(|e| Error::io(&f32_path, e))?;
        let file = AdapterFile {
            format_version: ADAPTER_FORMAT_VERSION,
            content_hash: self.content_hash(),
            backbone_hash: backbone_hash.to_owned(),
            f32_sha256: hex::encode(Sha256::digest(&bytes)),
            groups: self
                .groups()
                .into_iter()
                .map(|g| GroupEntry {
                    name: g.name,
                    offset: g.range.start,
                    len: g.range.len(),
                })
                .collect(),
            params: self.clone(),
        };
        let json_path = dir.join(ADAPTER_JSON);
        fs::write(&json_path, serde_json::to_string_pretty(&file)?).map_err(|e| Error::io(&json_path, e))
    }

    /// Loads and verifies a saved adapter; returns it with its backbone hash.
    pub fn load(dir: &Path) -> Result<(Self, String)> {
        let json_path = dir.join(ADAPTER_JSON);
        let text = fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
        let version: serde_json::Value = serde_json::from_str(&text)?;
        let found = version["format_version"].as_u64().unwrap_or(0) as u32;
        if found != ADAPTER_FORMAT_VERSION {
            return Err(Error::FormatVersion {
                found,
                supported: ADAPTER_FORMAT_VERSION,
            });
        }
        let file: AdapterFile = serde_json::from_value(version)?;
        let f32_path = dir.join(ADAPTER_F32);
        let bytes = fs::read(&f32_path).map_err(|e| Error::io(&f32_path, e))?;
        if hex::encode(Sha256::digest(&bytes)) != file.f32_sha256 {
            return Err(Error::Checksum(f32_path));
        }
        if file.params.content_hash() != file.content_hash {
            return Err(Error::Checksum(json_path));
        }
        Ok((file.params, file.backbone_hash))
    }
}

#[derive(Serialize, Deserialize)]
struct GroupEntry {
    name: String,
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct AdapterFile {
    format_version: u32,
    content_hash: String,
    backbone_hash: String,
    f32_sha256: String,
    groups: Vec<GroupEntry>,
    params: AdapterParams,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(flags: &AblationFlags) -> AdapterParams {
        let enc = FrozenEncoders::generate(8, 4, 4, 3);
        let names: Vec<String> = ["ab cd", "ef gh", "ij kl"].iter().map(|s| s.to_string()).collect();
        AdapterParams::init(&enc, &names, &AdapterConfig::default(), flags, 9).unwrap()
    }

    #[test]
    fn flat_view_round_trips_and_groups_tile() {
        let p = params(&AblationFlags::none());
        let flat = p.to_flat();
        let groups = p.groups();
        assert_eq!(groups.first().unwrap().range.start, 0);
        assert_eq!(groups.last().unwrap().range.end, flat.len());
        for w in groups.windows(2) {
            assert_eq!(w[0].range.end, w[1].range.start);
        }
        let bumped: Vec<f64> = flat.iter().map(|v| v + 0.25).collect();
        let q = p.from_flat_like(&bumped).unwrap();
        assert_eq!(q.to_flat(), bumped);
        assert_ne!(q.content_hash(), p.content_hash());
        assert!(p.from_flat_like(&flat[1..]).is_err());
    }

    #[test]
    fn simple_concat_swaps_integrator_groups() {
        let p = params(&AblationFlags::none().with(Ablation::SimpleConcat));
        let names: Vec<String> = p.groups().into_iter().map(|g| g.name).collect();
        assert!(names.contains(&"ctx.proj".to_string()));
        assert!(!names.contains(&"ctx.theta3".to_string()));
    }

    #[test]
    fn save_load_is_exact_and_detects_tampering() {
        let mut p = params(&AblationFlags::none());
        p.eval_context = Some(DVector::from_vec(vec![0.1, 1.0 / 3.0, -0.2, 0.7]));
        let dir = tempfile::tempdir().unwrap();
        p.save(dir.path(), "abc").unwrap();
        let (q, bb) = AdapterParams::load(dir.path()).unwrap();
        assert_eq!(q, p);
        assert_eq!(bb, "abc");
        let f = dir.path().join(ADAPTER_F32);
        let mut bytes = fs::read(&f).unwrap();
        bytes[0] ^= 1;
        fs::write(&f, bytes).unwrap();
        assert!(matches!(AdapterParams::load(dir.path()), Err(Error::Checksum(_))));
    }
}
