//! Multiplicative sustainability indicator `S = S_Tr × S_Inf`. Lower is better; 1 is ideal.
//!
//! `S_Tr = (1 + E_val)^α (1 + C_tr)^β (1 + DS)^γ` and
//! `S_Inf = (1 + E_test)^α′ (1 + C_inf)^β′`, with errors in raw units,
//! energies in Wh and the per-round transmitted model size in kB.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

const SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum SustainabilityError {
    #[error("{which} exponents must sum to 1, got {sum}")]
    ExponentSum { which: &'static str, sum: f64 },
    #[error("exponent {name} must be finite and non-negative, got {value}")]
    BadExponent { name: &'static str, value: f64 },
    #[error("{field} must be finite and non-negative, got {value}")]
    NegativeInput { field: &'static str, value: f64 },
    #[error("nothing to rank")]
    Empty,
}

pub type Result<T, E = SustainabilityError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Exponents {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub alpha_prime: f64,
    pub beta_prime: f64,
}

impl Default for Exponents {
    /// Equal weighting within each phase.
    fn default() -> Self {
        Self {
            alpha: 1.0 / 3.0,
            beta: 1.0 / 3.0,
            gamma: 1.0 / 3.0,
            alpha_prime: 0.5,
            beta_prime: 0.5,
        }
    }
}

impl Exponents {
    pub fn validate(&self) -> Result<()> {
        for (name, value) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("alpha_prime", self.alpha_prime),
            ("beta_prime", self.beta_prime),
        ] {
            if !(value.is_finite() && value >= 0.0) {
                return Err(SustainabilityError::BadExponent { name, value });
            }
        }
        let train = self.alpha + self.beta + self.gamma;
        if (train - 1.0).abs() > SUM_TOLERANCE {
            return Err(SustainabilityError::ExponentSum { which: "training", sum: train });
        }
        let inference = self.alpha_prime + self.beta_prime;
        if (inference - 1.0).abs() > SUM_TOLERANCE {
            return Err(SustainabilityError::ExponentSum {
                which: "inference",
                sum: inference,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SustainabilityInputs {
    /// Validation MAE, raw units, averaged over clients.
    pub e_val: f64,
    /// Training energy, Wh.
    pub c_tr: f64,
    /// Model size transmitted per round, kB.
    pub ds: f64,
    /// Test MAE, raw units, averaged over clients.
    pub e_test: f64,
    /// Inference energy per 1000 predictions, Wh.
    pub c_inf: f64,
    #[serde(default)]
    pub exponents: Exponents,
}

impl SustainabilityInputs {
    pub fn validate(&self) -> Result<()> {
        self.exponents.validate()?;
        for (field, value) in [
            ("e_val", self.e_val),
            ("c_tr", self.c_tr),
            ("ds", self.ds),
            ("e_test", self.e_test),
            ("c_inf", self.c_inf),
        ] {
            if !(value.is_finite() && value >= 0.0) {
                return Err(SustainabilityError::NegativeInput { field, value });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SustainabilityScore {
    pub s_tr: f64,
    pub s_inf: f64,
    pub s: f64,
    pub exponents: Exponents,
}

pub fn s_train(inputs: &SustainabilityInputs) -> Result<f64> {
    inputs.validate()?;
    let x = &inputs.exponents;
    Ok((1.0 + inputs.e_val).powf(x.alpha) * (1.0 + inputs.c_tr).powf(x.beta) * (1.0 + inputs.ds).powf(x.gamma))
}

pub fn s_inference(inputs: &SustainabilityInputs) -> Result<f64> {
    inputs.validate()?;
    let x = &inputs.exponents;
    Ok((1.0 + inputs.e_test).powf(x.alpha_prime) * (1.0 + inputs.c_inf).powf(x.beta_prime))
}

pub fn s_total(inputs: &SustainabilityInputs) -> Result<SustainabilityScore> {
    let s_tr = s_train(inputs)?;
    let s_inf = s_inference(inputs)?;
    Ok(SustainabilityScore {
        s_tr,
        s_inf,
        s: s_tr * s_inf,
        exponents: inputs.exponents,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedEntry {
    /// 1-based.
    pub rank: usize,
    pub name: String,
    pub inputs: SustainabilityInputs,
    pub score: SustainabilityScore,
    /// `S / S_best`.
    pub ratio_to_best: f64,
}

/// Scores every entry and sorts ascending by `S`. Ties keep input order.
pub fn rank(entries: &[(String, SustainabilityInputs)]) -> Result<Vec<RankedEntry>> {
    if entries.is_empty() {
        return Err(SustainabilityError::Empty);
    }
    let mut scored = entries
        .iter()
        .map(|(name, inputs)| Ok((name.clone(), *inputs, s_total(inputs)?)))
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|a, b| a.2.s.total_cmp(&b.2.s));
    let best = scored[0].2.s;
    Ok(scored
        .into_iter()
        .enumerate()
        .map(|(i, (name, inputs, score))| RankedEntry {
            rank: i + 1,
            name,
            inputs,
            score,
            ratio_to_best: score.s / best,
        })
        .collect())
}

/// Fixed-width ranking table.
pub fn format_ranking(ranked: &[RankedEntry]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:>4}  {:<18} {:>12} {:>10} {:>10} {:>12} {:>9} {:>10} {:>10} {:>12} {:>7}",
        "rank", "model", "E_val", "C_tr(Wh)", "DS(kB)", "E_test", "C_inf", "S_Tr", "S_Inf", "S", "ratio"
    );
    for e in ranked {
        let i = &e.inputs;
        let _ = writeln!(
            out,
            "{:>4}  {:<18} {:>12.4e} {:>10.4} {:>10.1} {:>12.4e} {:>9.4} {:>10.4e} {:>10.4e} {:>12.4e} {:>7.3}",
            e.rank, e.name, i.e_val, i.c_tr, i.ds, i.e_test, i.c_inf, e.score.s_tr, e.score.s_inf, e.score.s, e.ratio_to_best
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn inputs(e_val: f64, c_tr: f64, ds: f64, e_test: f64, c_inf: f64) -> SustainabilityInputs {
        SustainabilityInputs {
            e_val,
            c_tr,
            ds,
            e_test,
            c_inf,
            exponents: Exponents::default(),
        }
    }

    fn mean3(a: f64, b: f64, c: f64) -> f64 {
        (a + b + c) / 3.0
    }

    #[test]
    fn ideal_model_is_one() {
        let s = s_total(&SustainabilityInputs::default()).unwrap();
        assert_eq!((s.s_tr, s.s_inf, s.s), (1.0, 1.0, 1.0));
    }

    #[test]
    fn equal_inputs_geometric_mean() {
        let s = s_train(&inputs(7.0, 7.0, 7.0, 0.0, 0.0)).unwrap();
        assert!((s - 8.0).abs() < 1e-12);
    }

    #[test]
    fn lstm_training_score_direct() {
        let e_val = mean3(3.5868, 2.9398, 7.5419) * 1e6;
        let s = s_train(&inputs(e_val, 10.2346, 292.9, 0.0, 0.0)).unwrap();
        assert!((s - 2493.0).abs() < 1.0, "{s}");
    }

    #[test]
    fn inference_scores_match_published() {
        let lstm = s_inference(&inputs(0.0, 0.0, 0.0, mean3(8.9698, 3.2382, 9.8139) * 1e6, 0.0350)).unwrap();
        assert!((lstm - 2756.4).abs() / 2756.4 < 5e-4, "{lstm}");
        let tl = s_inference(&inputs(0.0, 0.0, 0.0, mean3(8.7798, 3.2620, 9.6667) * 1e6, 0.1671)).unwrap();
        assert!((tl - 2906.1).abs() / 2906.1 < 5e-4, "{tl}");
    }

    #[test]
    fn products_match_published() {
        assert!((2.3050e3f64 * 2.7564e3 / 0.6353e7 - 1.0).abs() < 1e-3);
        assert!((7.0643e3f64 * 2.9061e3 / 2.0530e7 - 1.0).abs() < 1e-3);
    }

    #[test]
    fn validation_errors() {
        let mut x = inputs(1.0, 1.0, 1.0, 1.0, 1.0);
        x.exponents.gamma = 0.5;
        assert!(matches!(s_train(&x), Err(SustainabilityError::ExponentSum { which: "training", .. })));
        let mut x = inputs(1.0, 1.0, 1.0, 1.0, 1.0);
        x.exponents.beta_prime = 0.6;
        assert!(matches!(s_inference(&x), Err(SustainabilityError::ExponentSum { which: "inference", .. })));
        assert!(matches!(
            s_total(&inputs(1.0, -2.0, 1.0, 1.0, 1.0)),
            Err(SustainabilityError::NegativeInput { field: "c_tr", .. })
        ));
        assert_eq!(rank(&[]), Err(SustainabilityError::Empty));
    }

    #[test]
    fn single_entry_rank() {
        let r = rank(&[("only".into(), inputs(1.0, 2.0, 3.0, 4.0, 5.0))]).unwrap();
        assert_eq!(r[0].rank, 1);
        assert_eq!(r[0].ratio_to_best, 1.0);
        assert!(format_ranking(&r).contains("only"));
    }

    #[test]
    fn ranking_orders_ascending() {
        let r = rank(&[
            ("big".into(), inputs(1e6, 40.0, 2000.0, 1e6, 0.2)),
            ("small".into(), inputs(1e6, 10.0, 300.0, 1e6, 0.03)),
        ])
        .unwrap();
        assert_eq!(r[0].name, "small");
        assert!(r[1].ratio_to_best > 1.0);
    }

    fn input_strategy() -> impl Strategy<Value = SustainabilityInputs> {
        (0.0f64..1e7, 0.0f64..100.0, 0.0f64..3000.0, 0.0f64..1e7, 0.0f64..1.0)
            .prop_map(|(a, b, c, d, e)| inputs(a, b, c, d, e))
    }

    proptest! {
        #[test]
        fn strictly_increasing_in_each_input(x in input_strategy(), which in 0usize..5, bump in 0.01f64..10.0) {
            let base = s_total(&x).unwrap();
            let mut y = x;
            match which {
                0 => y.e_val += bump,
                1 => y.c_tr += bump,
                2 => y.ds += bump,
                3 => y.e_test += bump,
                _ => y.c_inf += bump,
            }
            let moved = s_total(&y).unwrap();
            if which < 3 {
                prop_assert!(moved.s_tr > base.s_tr);
                prop_assert_eq!(moved.s_inf, base.s_inf);
            } else {
                prop_assert!(moved.s_inf > base.s_inf);
                prop_assert_eq!(moved.s_tr, base.s_tr);
            }
        }

        #[test]
        fn product_and_floor(x in input_strategy()) {
            let s = s_total(&x).unwrap();
            prop_assert_eq!(s.s, s.s_tr * s.s_inf);
            prop_assert!(s.s_tr >= 1.0 && s.s_inf >= 1.0);
        }

        #[test]
        fn equal_exponent_identity(v in 0.0f64..1e6) {
            let s = s_train(&inputs(v, v, v, 0.0, 0.0)).unwrap();
            prop_assert!((s - (1.0 + v)).abs() <= 1e-9 * (1.0 + v));
        }

        #[test]
        fn ranking_invariant_under_powers(xs in prop::collection::vec(input_strategy(), 1..8), p in 0.1f64..3.0) {
            let named: Vec<(String, SustainabilityInputs)> =
                xs.iter().enumerate().map(|(i, x)| (i.to_string(), *x)).collect();
            let order: Vec<String> = rank(&named).unwrap().into_iter().map(|e| e.name).collect();
            let mut powered: Vec<(String, f64)> =
                named.iter().map(|(n, x)| (n.clone(), s_total(x).unwrap().s.powf(p))).collect();
            powered.sort_by(|a, b| a.1.total_cmp(&b.1));
            let by_power: Vec<String> = powered.into_iter().map(|e| e.0).collect();
            prop_assert_eq!(order, by_power);
        }
    }
}
