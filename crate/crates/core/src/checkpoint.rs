//! Checkpoint directories: one safetensors file per component plus a TOML
//! manifest holding configurations, the schedule and every tensor's shape.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use candle_nn::{VarBuilder, VarMap};
use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};

use crate::autoencoder::{ToyVae, VaeConfig};
use crate::diffusion::{DenoiserConfig, ToyDenoiser};
use crate::entropy::{EntropyConfig, EntropyModel};
use crate::error::{Error, Result};
use crate::param_estimator::{EstimatorConfig, ParamEstimator};
use crate::nn::{reseed, trainable};
use crate::schedule::{NoiseSchedule, ScheduleParams};

pub const CHECKPOINT_FORMAT: &str = "ldc-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.toml";

/// Environment variable overriding the default checkpoint directory.
pub const CHECKPOINT_DIR_ENV: &str = "LDC_CHECKPOINT_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Vae,
    Denoiser,
    Estimator,
    Entropy,
}

impl Component {
    pub const ALL: [Component; 4] = [Component::Vae, Component::Denoiser, Component::Estimator, Component::Entropy];

    pub fn name(self) -> &'static str {
        match self {
            Component::Vae => "vae",
            Component::Denoiser => "denoiser",
            Component::Estimator => "estimator",
            Component::Entropy => "entropy",
        }
    }

    pub fn file_name(self) -> String {
        format!("{}.safetensors", self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    /// Multiplier applied to VAE posterior means.
    pub latent_scale: f64,
    /// The codec was trained with the dequantized latent scaled by `sqrt(alpha_bar_t)`.
    #[serde(default)]
    pub rescale_input: bool,
    pub schedule: ScheduleParams,
    pub vae: VaeConfig,
    pub denoiser: DenoiserConfig,
    pub estimator: EstimatorConfig,
    pub entropy: EntropyConfig,
    /// Component name to tensor name to shape.
    #[serde(default)]
    pub shapes: BTreeMap<String, BTreeMap<String, Vec<usize>>>,
}

impl Manifest {
    pub fn new(
        latent_scale: f64,
        schedule: ScheduleParams,
        vae: VaeConfig,
        denoiser: DenoiserConfig,
        estimator: EstimatorConfig,
        entropy: EntropyConfig,
    ) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            latent_scale,
            schedule,
            vae,
            denoiser,
            estimator,
            entropy,
            rescale_input: false,
            shapes: BTreeMap::new(),
        }
    }

    /// Components must agree on the latent channel count.
    pub fn validate(&self) -> Result<()> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unknown format {:?}", self.format)));
        }
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {}", self.version)));
        }
        let c = self.vae.latent_channels;
        for (name, other) in [
            ("denoiser", self.denoiser.latent_channels),
            ("estimator", self.estimator.latent_channels),
            ("entropy model", self.entropy.latent_channels),
        ] {
            if other != c {
                return Err(Error::ComponentMismatch(format!(
                    "{name} has {other} latent channels, autoencoder has {c}"
                )));
            }
        }
        if !(self.latent_scale.is_finite() && self.latent_scale > 0.0) {
            return Err(Error::Checkpoint("latent_scale must be positive".into()));
        }
        Ok(())
    }
}

fn header_metadata() -> HashMap<String, String> {
    HashMap::from([
        ("format".to_string(), CHECKPOINT_FORMAT.to_string()),
        ("version".to_string(), CHECKPOINT_VERSION.to_string()),
    ])
}

/// Writes named f32 tensors with the checkpoint metadata header.
pub fn save_tensors(path: &Path, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
    let mut buffers = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        let values = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        buffers.push((name.clone(), t.dims().to_vec(), bytes));
    }
    let views = buffers
        .iter()
        .map(|(n, shape, bytes)| Ok((n.as_str(), TensorView::new(Dtype::F32, shape.clone(), bytes)?)))
        .collect::<std::result::Result<Vec<_>, safetensors::SafeTensorError>>()
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    let data = safetensors::serialize(views, Some(header_metadata())).map_err(|e| Error::Checkpoint(e.to_string()))?;
    fs::write(path, data)?;
    Ok(())
}

/// Parses a tensor file written by [`save_tensors`].
pub fn parse_tensors(bytes: &[u8], device: &Device) -> Result<HashMap<String, Tensor>> {
    let st = SafeTensors::deserialize(bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let (_, meta) = SafeTensors::read_metadata(bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let info = meta.metadata().clone().unwrap_or_default();
    if info.get("format").map(String::as_str) != Some(CHECKPOINT_FORMAT) {
        return Err(Error::Checkpoint("tensor file is not an ldc checkpoint".into()));
    }
    if info.get("version").map(String::as_str) != Some(&CHECKPOINT_VERSION.to_string()) {
        return Err(Error::Checkpoint("unsupported tensor file version".into()));
    }
    let mut out = HashMap::new();
    for (name, view) in st.tensors() {
        if view.dtype() != Dtype::F32 {
            return Err(Error::Checkpoint(format!("{name}: expected f32, found {:?}", view.dtype())));
        }
        let values: Vec<f32> = view
            .data()
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.insert(name, Tensor::from_vec(values, view.shape(), device)?);
    }
    Ok(out)
}

pub fn load_tensors(path: &Path, device: &Device) -> Result<HashMap<String, Tensor>> {
    parse_tensors(&fs::read(path)?, device)
}

/// Snapshot of every variable in `varmap`.
pub fn varmap_tensors(varmap: &VarMap) -> Result<BTreeMap<String, Tensor>> {
    let data = varmap
        .data()
        .lock()
        .map_err(|_| Error::Checkpoint("variable map lock poisoned".into()))?;
    data.iter()
        .map(|(k, v)| Ok((k.clone(), v.as_tensor().copy()?.detach())))
        .collect()
}

/// Copies `tensors` into the variables of `varmap`; names and shapes must match exactly.
pub fn load_into_varmap(varmap: &VarMap, tensors: &HashMap<String, Tensor>) -> Result<()> {
    let data = varmap
        .data()
        .lock()
        .map_err(|_| Error::Checkpoint("variable map lock poisoned".into()))?;
    if data.len() != tensors.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} tensors, model expects {}",
            tensors.len(),
            data.len()
        )));
    }
    for (name, var) in data.iter() {
        let t = tensors
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
        if t.dims() != var.dims() {
            return Err(Error::Checkpoint(format!(
                "{name}: checkpoint shape {:?}, model shape {:?}",
                t.dims(),
                var.dims()
            )));
        }
        var.set(&t.to_dtype(var.dtype())?)?;
    }
    Ok(())
}

/// Frozen (non-trainable) builder over a detached copy of `varmap`.
pub fn frozen_builder(varmap: &VarMap, device: &Device) -> Result<VarBuilder<'static>> {
    let map: HashMap<String, Tensor> = varmap_tensors(varmap)?.into_iter().collect();
    Ok(VarBuilder::from_tensors(map, DType::F32, device))
}

/// Writes a full checkpoint directory.
pub fn save_checkpoint(dir: &Path, manifest: &Manifest, components: &[(Component, &VarMap); 4]) -> Result<()> {
    manifest.validate()?;
    fs::create_dir_all(dir)?;
    let mut manifest = manifest.clone();
    manifest.shapes.clear();
    for (component, varmap) in components {
        let tensors = varmap_tensors(varmap)?;
        let shapes = tensors.iter().map(|(k, t)| (k.clone(), t.dims().to_vec())).collect();
        manifest.shapes.insert(component.name().to_string(), shapes);
        save_tensors(&dir.join(component.file_name()), &tensors)?;
    }
    let text = toml::to_string(&manifest).map_err(|e| Error::Checkpoint(e.to_string()))?;
    fs::write(dir.join(MANIFEST_FILE), text)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let manifest: Manifest = toml::from_str(&text).map_err(|e| Error::Checkpoint(e.to_string()))?;
    manifest.validate()?;
    Ok(manifest)
}

/// Every trained component, loaded frozen.
pub struct CodecModels {
    pub manifest: Manifest,
    pub schedule: NoiseSchedule,
    pub vae: ToyVae,
    pub denoiser: ToyDenoiser,
    pub estimator: ParamEstimator,
    pub entropy: EntropyModel,
    /// CRC-32 over the manifest and all tensor files; recorded in streams.
    pub model_id: u32,
    pub dir: PathBuf,
}

impl CodecModels {
    pub fn load(dir: &Path) -> Result<Self> {
        let device = Device::Cpu;
        let manifest_bytes = fs::read(dir.join(MANIFEST_FILE))?;
        let manifest = read_manifest(dir)?;
        let mut crc = crc32fast::Hasher::new();
        crc.update(&manifest_bytes);
        let mut tensors = HashMap::new();
        for component in Component::ALL {
            let bytes = fs::read(dir.join(component.file_name()))?;
            crc.update(&bytes);
            let t = parse_tensors(&bytes, &device)?;
            if let Some(expected) = manifest.shapes.get(component.name()) {
                let actual: BTreeMap<String, Vec<usize>> = t.iter().map(|(k, v)| (k.clone(), v.dims().to_vec())).collect();
                if &actual != expected {
                    return Err(Error::Checkpoint(format!(
                        "{} tensors do not match the manifest shapes",
                        component.name()
                    )));
                }
            }
            tensors.insert(component, t);
        }
        let mut builder = |c: Component| VarBuilder::from_tensors(tensors.remove(&c).unwrap_or_default(), DType::F32, &device);
        let schedule = NoiseSchedule::new(manifest.schedule)?;
        let mut vae = ToyVae::new(manifest.vae.clone(), builder(Component::Vae))?;
        vae.set_latent_scale(manifest.latent_scale);
        let denoiser = ToyDenoiser::new(manifest.denoiser.clone(), schedule.clone(), builder(Component::Denoiser))?;
        let estimator = ParamEstimator::new(manifest.estimator.clone(), builder(Component::Estimator))?;
        let entropy = EntropyModel::new(manifest.entropy.clone(), builder(Component::Entropy))?;
        Ok(Self {
            manifest,
            schedule,
            vae,
            denoiser,
            estimator,
            entropy,
            model_id: crc.finalize(),
            dir: dir.to_path_buf(),
        })
    }
}

/// Freshly initialized, trainable components with their variable maps.
pub struct ModelSet {
    pub manifest: Manifest,
    pub schedule: NoiseSchedule,
    pub vae: ToyVae,
    pub denoiser: ToyDenoiser,
    pub estimator: ParamEstimator,
    pub entropy: EntropyModel,
    pub vae_vars: VarMap,
    pub denoiser_vars: VarMap,
    pub estimator_vars: VarMap,
    pub entropy_vars: VarMap,
}

impl ModelSet {
    /// Builds every component and initializes it deterministically from `seed`.
    pub fn new(manifest: Manifest, seed: u64) -> Result<Self> {
        manifest.validate()?;
        let device = Device::Cpu;
        let schedule = NoiseSchedule::new(manifest.schedule)?;
        let (vae_vars, vb) = trainable(DType::F32, &device);
        let mut vae = ToyVae::new(manifest.vae.clone(), vb)?;
        vae.set_latent_scale(manifest.latent_scale);
        let (denoiser_vars, vb) = trainable(DType::F32, &device);
        let denoiser = ToyDenoiser::new(manifest.denoiser, schedule.clone(), vb)?;
        let (estimator_vars, vb) = trainable(DType::F32, &device);
        let estimator = ParamEstimator::new(manifest.estimator.clone(), vb)?;
        let (entropy_vars, vb) = trainable(DType::F32, &device);
        let entropy = EntropyModel::new(manifest.entropy.clone(), vb)?;
        for (i, vm) in [&vae_vars, &denoiser_vars, &estimator_vars, &entropy_vars].into_iter().enumerate() {
            reseed(vm, seed.wrapping_mul(4).wrapping_add(i as u64))?;
        }
        estimator.init_head(&estimator_vars)?;
        Ok(Self {
            manifest,
            schedule,
            vae,
            denoiser,
            estimator,
            entropy,
            vae_vars,
            denoiser_vars,
            estimator_vars,
            entropy_vars,
        })
    }

    pub fn varmap(&self, component: Component) -> &VarMap {
        match component {
            Component::Vae => &self.vae_vars,
            Component::Denoiser => &self.denoiser_vars,
            Component::Estimator => &self.estimator_vars,
            Component::Entropy => &self.entropy_vars,
        }
    }

    pub fn set_latent_scale(&mut self, scale: f64) {
        self.manifest.latent_scale = scale;
        self.vae.set_latent_scale(scale);
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let parts = Component::ALL.map(|c| (c, self.varmap(c)));
        save_checkpoint(dir, &self.manifest, &parts)
    }

    /// Restores all weights and the latent scale from a checkpoint directory.
    pub fn load_weights(&mut self, dir: &Path) -> Result<()> {
        let manifest = read_manifest(dir)?;
        if manifest.vae != self.manifest.vae
            || manifest.denoiser != self.manifest.denoiser
            || manifest.estimator != self.manifest.estimator
            || manifest.entropy != self.manifest.entropy
            || manifest.schedule != self.manifest.schedule
        {
            return Err(Error::ComponentMismatch("checkpoint configuration differs from the model".into()));
        }
        for c in Component::ALL {
            load_into_varmap(self.varmap(c), &load_tensors(&dir.join(c.file_name()), &Device::Cpu)?)?;
        }
        self.set_latent_scale(manifest.latent_scale);
        Ok(())
    }
}
