//! FLOPs accounting for fine-tuning versus merging.
//!
//! Uses the usual transformer heuristics: a forward pass costs `2 P` FLOPs
//! per token and a training step (forward plus backward) `6 P`.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CostInputs {
    pub param_count: u64,
    pub train_tokens: u64,
    pub fisher_examples: u64,
    pub tokens_per_example: u64,
    pub eval_tokens: u64,
    pub num_models: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostEstimate {
    pub train_flops: f64,
    pub fisher_flops: f64,
    pub merge_flops: f64,
    pub eval_flops: f64,
}

impl CostEstimate {
    pub fn isotropic_total(&self) -> f64 {
        self.merge_flops + self.eval_flops
    }

    pub fn fisher_total(&self) -> f64 {
        self.fisher_flops + self.merge_flops + self.eval_flops
    }
}

pub fn estimate_costs(inputs: &CostInputs) -> CostEstimate {
    let p = inputs.param_count as f64;
    let fisher_tokens = inputs.fisher_examples as f64 * inputs.tokens_per_example as f64;
    CostEstimate {
        train_flops: 6.0 * p * inputs.train_tokens as f64,
        // one backward pass per example, the same as a training step
        fisher_flops: 6.0 * p * fisher_tokens,
        // multiply-accumulate into numerator and denominator, then a divide
        merge_flops: 3.0 * p * inputs.num_models as f64,
        eval_flops: 2.0 * p * inputs.eval_tokens as f64,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_params_cost_nothing() {
        let c = estimate_costs(&CostInputs {
            train_tokens: 10,
            fisher_examples: 3,
            tokens_per_example: 5,
            eval_tokens: 9,
            num_models: 2,
            ..Default::default()
        });
        assert_eq!((c.train_flops, c.fisher_flops, c.merge_flops, c.eval_flops), (0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn formulas() {
        let c = estimate_costs(&CostInputs {
            param_count: 10,
            train_tokens: 7,
            fisher_examples: 3,
            tokens_per_example: 5,
            eval_tokens: 11,
            num_models: 2,
        });
        assert_eq!(c.train_flops, 420.0);
        assert_eq!(c.fisher_flops, 900.0);
        assert_eq!(c.merge_flops, 60.0);
        assert_eq!(c.eval_flops, 220.0);
    }
}
