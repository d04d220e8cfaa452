//! Quantization: affine primitives, fake-quant state attached to a model,
//! post-training calibration, and the INT8 archive.

mod archive;
mod spec;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

pub use archive::{export_int8, load_int8, Int8Archive, INT8_MAGIC};
pub use spec::{
    dequantize, fake_quant_backward, fake_quant_forward, fake_quant_with_mask, qrange, quantize, round_half_away,
    Granularity, QuantSpec, RangeObserver, Scheme,
};

use crate::engine::Tensor;
use crate::error::{Error, Result};
use crate::network::Model;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuantConfig {
    pub bit_width: u32,
    /// EMA momentum of activation ranges during QAT.
    pub observer_momentum: f32,
    /// Keep the input and prediction convolutions in floating point.
    pub exempt_first_last: bool,
}

impl Default for QuantConfig {
    fn default() -> Self {
        Self {
            bit_width: 8,
            observer_momentum: 0.99,
            exempt_first_last: false,
        }
    }
}

impl QuantConfig {
    pub fn validate(&self) -> Result<()> {
        if !(2..=32).contains(&self.bit_width) {
            return Err(Error::Config {
                key: "quantization.bit_width".into(),
                reason: format!("{} is outside 2..=32", self.bit_width),
            });
        }
        if !(0.0..1.0).contains(&self.observer_momentum) {
            return Err(Error::Config {
                key: "quantization.observer_momentum".into(),
                reason: "must lie in [0, 1)".into(),
            });
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObserverKind {
    MinMax,
    Ema { momentum: f32 },
}

/// Fake-quantization state of a model, keyed by convolution name. Each
/// convolution's input activation is quantized per tensor (asymmetric) and
/// its weight per output channel (symmetric).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QatState {
    pub bit_width: u32,
    pub enabled: bool,
    pub observer: ObserverKind,
    /// Observe in eval mode too (calibration passes).
    pub calibrating: bool,
    /// Stop updating ranges; `frozen_specs` are used verbatim.
    pub frozen: bool,
    pub exempt: Vec<String>,
    pub ranges: IndexMap<String, RangeObserver>,
    pub frozen_specs: IndexMap<String, QuantSpec>,
}

impl QatState {
    pub fn new(cfg: &QuantConfig, observer: ObserverKind, model: &Model) -> Self {
        let exempt = if cfg.exempt_first_last {
            let mut v = vec![model.input_conv()];
            v.extend(model.output_convs());
            v
        } else {
            Vec::new()
        };
        Self {
            bit_width: cfg.bit_width,
            enabled: true,
            observer,
            calibrating: false,
            frozen: false,
            exempt,
            ranges: IndexMap::new(),
            frozen_specs: IndexMap::new(),
        }
    }

    pub fn is_quantized(&self, key: &str) -> bool {
        !self.exempt.iter().any(|e| e == key)
    }

    /// Updates the activation range of convolution `key`.
    pub fn observe(&mut self, key: &str, act: &Tensor, train: bool) {
        if self.frozen && !self.calibrating {
            return;
        }
        let seen = self.ranges.contains_key(key);
        let update = self.calibrating || (train && self.enabled) || (self.enabled && !seen);
        if !update {
            return;
        }
        let obs = self.ranges.entry(key.to_string()).or_default();
        match self.observer {
            ObserverKind::MinMax => obs.observe_minmax(act),
            ObserverKind::Ema { momentum } => obs.observe_ema(act, momentum),
        }
    }

    pub fn activation_spec(&self, key: &str) -> Option<QuantSpec> {
        if let Some(s) = self.frozen_specs.get(key) {
            return Some(s.clone());
        }
        self.ranges.get(key).map(|o| o.spec(self.bit_width))
    }

    /// `(activation, weight)` specs for convolution `key`, or `None` when it
    /// is not fake-quantized.
    pub fn specs_for(&self, key: &str, weight: &Tensor) -> Option<(QuantSpec, QuantSpec)> {
        if !self.enabled || !self.is_quantized(key) {
            return None;
        }
        let a = self.activation_spec(key)?;
        Some((a, QuantSpec::for_weight(weight, self.bit_width)))
    }

    /// Fixes the current activation ranges.
    pub fn freeze(&mut self) {
        let specs: IndexMap<String, QuantSpec> = self
            .ranges
            .iter()
            .map(|(k, o)| (k.clone(), o.spec(self.bit_width)))
            .collect();
        self.frozen_specs = specs;
        self.frozen = true;
        self.calibrating = false;
    }
}

/// Quantization specs of every quantized tensor: `"{conv}.weight"` and
/// `"{conv}.input"` per convolution.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct QuantSpecs(pub IndexMap<String, QuantSpec>);

impl QuantSpecs {
    /// Specs implied by a model's fake-quant state and current weights.
    pub fn from_model(model: &Model) -> Result<Self> {
        let q = model
            .qat
            .as_ref()
            .ok_or_else(|| Error::MissingSpec("model carries no quantization state".into()))?;
        let mut out = IndexMap::new();
        for key in model.conv_keys() {
            if !q.is_quantized(&key) {
                continue;
            }
            let (w, _) = model.conv_params(&key);
            out.insert(w.clone(), QuantSpec::for_weight(model.store.tensor(&w), q.bit_width));
            if let Some(a) = q.activation_spec(&key) {
                out.insert(format!("{key}.input"), a);
            }
        }
        Ok(Self(out))
    }

    pub fn get(&self, name: &str) -> Option<&QuantSpec> {
        self.0.get(name)
    }
}

/// Converts the model to deploy form and attaches fake quantization with
/// EMA activation observers. The model stays trainable.
pub fn prepare_qat(model: &mut Model, cfg: &QuantConfig) -> Result<()> {
    cfg.validate()?;
    model.reparameterize();
    let state = QatState::new(
        cfg,
        ObserverKind::Ema {
            momentum: cfg.observer_momentum,
        },
        model,
    );
    model.qat = Some(state);
    Ok(())
}

/// Post-training calibration: converts to deploy form, records plain
/// min/max activation ranges of the float model over `batches`, then
/// freezes the ranges and enables fake quantization.
pub fn calibrate_ptq(model: &mut Model, batches: &[Tensor], cfg: &QuantConfig) -> Result<QuantSpecs> {
    cfg.validate()?;
    if batches.is_empty() {
        return Err(Error::Argument("calibration needs at least one batch".into()));
    }
    model.reparameterize();
    let mut state = QatState::new(cfg, ObserverKind::MinMax, model);
    state.enabled = false;
    state.calibrating = true;
    model.qat = Some(state);
    for b in batches {
        model.forward(b)?;
    }
    let state = model.qat.as_mut().expect("state installed above");
    state.freeze();
    state.enabled = true;
    QuantSpecs::from_model(model)
}
