//! Browser bindings. A [`Demo`] holds one synthetic complex and, once trained,
//! one model; every method returns JSON for the page to plot.

use neuralmd::bindingnet::ModelConfig;
use neuralmd::data::{generate_synthetic, ComplexRecord, ForceFieldKind, SyntheticSpec};
use neuralmd::dynamics::SolverConfig;
use neuralmd::geometry::Vec3;
use neuralmd::training::{make_split, predict, train_model, MethodKind, MetricReport, Split, SplitKind, TrainConfig, TrainedModel};
use neuralmd::{Error, Result};
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

fn js_err(e: Error) -> JsValue {
    JsValue::from_str(&e.to_string())
}

fn points(s: &[Vec3]) -> Value {
    s.iter().map(|p| json!([p.x, p.y, p.z])).collect()
}

fn frames(t: &[Vec<Vec3>]) -> Value {
    t.iter().map(|s| points(s)).collect()
}

/// Small enough to train in a few seconds on one browser thread.
fn demo_config(seed: u64, epochs: usize) -> TrainConfig {
    TrainConfig {
        model: ModelConfig {
            hidden: 8,
            layers: 1,
            ..ModelConfig::default()
        },
        solver: SolverConfig {
            substeps: 2,
            ..SolverConfig::default()
        },
        epochs,
        lr: 1e-3,
        horizon: 3,
        start_stride: 3,
        seed,
        ..TrainConfig::default()
    }
}

#[wasm_bindgen]
pub struct Demo {
    record: ComplexRecord,
    split: Split,
    model: Option<TrainedModel>,
}

impl Demo {
    pub fn try_new(kind: &str, atoms: u32, snapshots: u32, seed: u32) -> Result<Demo> {
        let kind = match kind {
            "harmonic-tether" => ForceFieldKind::HarmonicTether,
            "lennard-jones-binding" => ForceFieldKind::LennardJonesBinding,
            other => return Err(Error::Config(format!("unknown force field {other:?}"))),
        };
        let spec = SyntheticSpec {
            kind,
            atoms: atoms as usize,
            snapshots: snapshots as usize,
            seed: seed as u64,
            ..SyntheticSpec::default()
        };
        let record = generate_synthetic(&spec)?;
        let split = make_split(SplitKind::SingleTrajectory, std::slice::from_ref(&record), &TrainConfig::default())?;
        Ok(Demo {
            record,
            split,
            model: None,
        })
    }

    pub fn try_trajectory(&self) -> Result<String> {
        let v = json!({
            "id": self.record.id,
            "sites": points(&self.record.protein.ca),
            "positions": frames(&self.record.trajectory.positions),
            "train_snapshots": self.split.train.len(),
        });
        Ok(v.to_string())
    }

    /// Trains `method` on the training prefix and returns the loss curve.
    pub fn try_train(&mut self, method: &str, epochs: u32, seed: u32) -> Result<String> {
        let method: MethodKind = method.parse()?;
        let cfg = demo_config(seed as u64, epochs as usize);
        let init = TrainedModel::init(method, &cfg, !self.record.has_velocities())?;
        let out = train_model(init, std::slice::from_ref(&self.record), &self.split)?;
        self.model = Some(out.model);
        Ok(json!({ "method": method.name(), "loss": out.curves.train, "best_epoch": out.best_epoch }).to_string())
    }

    /// Rolls the trained model over the held-out snapshots and scores it.
    pub fn try_rollout(&self) -> Result<String> {
        let model = self.model.as_ref().ok_or(Error::EmptyInput("train a model before rolling out"))?;
        let start = *self.split.train.last().ok_or(Error::EmptyInput("split has no training snapshots"))?;
        let steps = self.split.test.len();
        let (pred, truncated) = predict(model, &self.record, start, steps, 0)?;
        let truth: Vec<Vec<Vec3>> = self.split.test.iter().map(|&t| self.record.trajectory.positions[t].clone()).collect();
        // wall-clock timing is unavailable on wasm32-unknown-unknown
        let report = MetricReport::from_rollouts(
            model.method.name(),
            "single",
            &[(self.record.id.clone(), pred.clone(), truth, truncated)],
            0.0,
        )?;
        Ok(json!({
            "start": start,
            "predicted": frames(&pred),
            "mae": report.mae,
            "mse": report.mse,
            "stability": report.stability,
            "truncated": truncated,
        })
        .to_string())
    }
}

#[wasm_bindgen]
impl Demo {
    /// Integrates a synthetic complex. `kind` is `harmonic-tether` or
    /// `lennard-jones-binding`.
    #[wasm_bindgen(constructor)]
    pub fn new(kind: &str, atoms: u32, snapshots: u32, seed: u32) -> std::result::Result<Demo, JsValue> {
        Self::try_new(kind, atoms, snapshots, seed).map_err(js_err)
    }

    pub fn trajectory(&self) -> std::result::Result<String, JsValue> {
        self.try_trajectory().map_err(js_err)
    }

    pub fn train(&mut self, method: &str, epochs: u32, seed: u32) -> std::result::Result<String, JsValue> {
        self.try_train(method, epochs, seed).map_err(js_err)
    }

    pub fn rollout(&self) -> std::result::Result<String, JsValue> {
        self.try_rollout().map_err(js_err)
    }
}
