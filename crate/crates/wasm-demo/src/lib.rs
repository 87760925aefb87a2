//! Two small classifiers trained from a shared initialization on related
//! tasks, merged in the browser at whatever coefficient the slider says.

use fishmerge::fisher::estimate_fisher_exact;
use fishmerge::search::{interpolation_curve, CurveInputs, CurveModes, SweepTemplate};
use fishmerge::suite::{make_task_suite, Task};
use fishmerge::train::train;
use fishmerge::{
    Classifier, FisherConfig, FisherDiagonal, LabeledDataset, MergeMode, ModelSpec, ParameterSet, Role, TrainConfig,
};
use serde_json::json;
use wasm_bindgen::prelude::*;

/// Half-width of the square drawn by [`Demo::decision_field`].
pub const EXTENT: f64 = 4.0;

fn js_err(e: fishmerge::Error) -> JsError {
    JsError::new(&e.to_string())
}

fn parse_mode(mode: &str) -> Result<MergeMode, JsError> {
    match mode {
        "fisher" => Ok(MergeMode::Fisher),
        "isotropic" => Ok(MergeMode::Isotropic),
        other => Err(JsError::new(&format!("unknown mode '{other}'"))),
    }
}

#[wasm_bindgen]
pub struct Demo {
    spec: ModelSpec,
    pre: ParameterSet,
    ft: ParameterSet,
    pre_fisher: FisherDiagonal,
    ft_fisher: FisherDiagonal,
    iid: LabeledDataset,
    ood: LabeledDataset,
}

#[wasm_bindgen]
impl Demo {
    /// Trains `pre` on the base blobs task and `ft` on `target` starting
    /// from `pre`, then estimates both Fishers.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u64, target: &str, epochs: usize) -> Result<Demo, JsError> {
        let suite = make_task_suite(seed).map_err(js_err)?;
        let base = suite.task("blobs-base").unwrap();
        let ood: &Task = suite
            .task(target)
            .filter(|t| t.num_classes() == base.num_classes())
            .ok_or_else(|| JsError::new(&format!("'{target}' is not a three-class suite task")))?;
        let spec = ModelSpec { share_head: true, ..suite.spec.clone() };
        let mut init = suite.init.clone();
        for name in spec.head_tensor_names() {
            init.set_role(&name, Role::Body).map_err(js_err)?;
        }
        let cfg = TrainConfig { epochs, seed, ..Default::default() };
        let pre = train(&spec, &init, &base.train, &cfg).map_err(js_err)?;
        let ft = train(&spec, &pre, &ood.train, &cfg).map_err(js_err)?;
        let fc = FisherConfig::default();
        let pre_fisher = estimate_fisher_exact(&spec, &pre, &base.train, &fc).map_err(js_err)?;
        let ft_fisher = estimate_fisher_exact(&spec, &ft, &ood.train, &fc).map_err(js_err)?;
        Ok(Demo { spec, pre, ft, pre_fisher, ft_fisher, iid: base.test.clone(), ood: ood.test.clone() })
    }

    fn merged(&self, lambda_pre: f64, mode: MergeMode) -> Result<ParameterSet, JsError> {
        if !(0.0..=1.0).contains(&lambda_pre) {
            return Err(JsError::new("lambda must lie in [0, 1]"));
        }
        let target = if lambda_pre > 0.5 { 0 } else { 1 };
        let template = SweepTemplate::new(
            vec![&self.pre, &self.ft],
            vec![Some(&self.pre_fisher), Some(&self.ft_fisher)],
            target,
            mode,
        );
        template.merged(&[lambda_pre, 1.0 - lambda_pre]).map_err(js_err)
    }

    /// Predicted class on a `resolution`² grid over the square of half-width
    /// [`EXTENT`], row-major from the top-left corner.
    pub fn decision_field(&self, lambda_pre: f64, mode: &str, resolution: usize) -> Result<Vec<u8>, JsError> {
        let model = Classifier::new(&self.spec, &self.merged(lambda_pre, parse_mode(mode)?)?).map_err(js_err)?;
        let step = 2.0 * EXTENT / resolution as f64;
        let mut out = Vec::with_capacity(resolution * resolution);
        for row in 0..resolution {
            let y = EXTENT - (row as f64 + 0.5) * step;
            for col in 0..resolution {
                let x = -EXTENT + (col as f64 + 0.5) * step;
                out.push(model.forward(&[x, y]).map_err(js_err)?.argmax() as u8);
            }
        }
        Ok(out)
    }

    /// `{"iid_acc": .., "ood_acc": ..}` for the merge at `lambda_pre`.
    pub fn accuracy(&self, lambda_pre: f64, mode: &str) -> Result<String, JsError> {
        let model = Classifier::new(&self.spec, &self.merged(lambda_pre, parse_mode(mode)?)?).map_err(js_err)?;
        let iid = model.evaluate(&self.iid, None).map_err(js_err)?;
        let ood = model.evaluate(&self.ood, None).map_err(js_err)?;
        Ok(json!({ "iid_acc": iid, "ood_acc": ood }).to_string())
    }

    /// Test points of the target task as flat `x, y, label` triples.
    pub fn ood_points(&self) -> Vec<f64> {
        (0..self.ood.len())
            .flat_map(|i| {
                let r = self.ood.row(i);
                [r[0], r[1], self.ood.label(i) as f64]
            })
            .collect()
    }

    /// Both interpolation curves as sweep-result JSON.
    pub fn curve(&self, step: f64) -> Result<String, JsError> {
        let inputs = CurveInputs {
            spec: &self.spec,
            pre: &self.pre,
            ft: &self.ft,
            fishers: Some((&self.pre_fisher, &self.ft_fisher)),
            iid: &self.iid,
            ood: &self.ood,
        };
        interpolation_curve(&inputs, step, CurveModes::Both).and_then(|c| c.to_json()).map_err(js_err)
    }
}
