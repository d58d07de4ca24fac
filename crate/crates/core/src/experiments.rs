//! Weight sweeps, guidance hierarchy, tuning and benchmark harnesses.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bayesopt::{optimize, BoError, BoProblem, BoResult};
use crate::denoisers::{ModelError, ModelSet};
use crate::flowcore::TimeGrid;
use crate::metrics::{apply_radar, MetricError, MetricReport};
use crate::sampler::{sample, DiscreteFormat, GuidanceSpec, Method, SampleError, SampleRequest, Weights};
use crate::toymol::Dataset;

/// Weights 1.0 to 3.0 in steps of 0.5.
pub const WIDE_GRID: [f64; 5] = [1.0, 1.5, 2.0, 2.5, 3.0];
/// Log-rate discrete weights 1.0 to 1.2 in steps of 0.05.
pub const NARROW_GRID: [f64; 5] = [1.0, 1.05, 1.1, 1.15, 1.2];

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Sample(#[from] SampleError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Bo(#[from] BoError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{0}")]
    Invalid(String),
}

/// Samples under `spec` and scores the result.
pub fn evaluate(
    spec: &GuidanceSpec,
    models: &ModelSet,
    ds: &Dataset,
    req: &SampleRequest,
) -> Result<MetricReport, ExperimentError> {
    let start = Instant::now();
    let samples = sample(spec, models, ds, req)?;
    let secs = start.elapsed().as_secs_f64();
    Ok(MetricReport::from_samples(&samples, secs, spec.method.forward_passes())?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub format: DiscreteFormat,
    pub w1: f64,
    pub w2: f64,
    pub report: MetricReport,
}

/// Discrete weights swept for `format`.
pub fn sweep_grid(format: DiscreteFormat) -> &'static [f64; 5] {
    if format == DiscreteFormat::LogRate {
        &NARROW_GRID
    } else {
        &WIDE_GRID
    }
}

/// CFG over every format: a 5×5 `(w1, w2)` grid, narrow in `w2` for log-rate.
pub fn sweep_formats(
    models: &ModelSet,
    ds: &Dataset,
    req: &SampleRequest,
) -> Result<Vec<SweepRow>, ExperimentError> {
    let mut rows = Vec::new();
    for format in DiscreteFormat::ALL {
        for &w1 in &WIDE_GRID {
            for &w2 in sweep_grid(format) {
                let spec = GuidanceSpec::cfg(format, w1, w2);
                log::info!("sweep {} w1={w1} w2={w2}", format.name());
                rows.push(SweepRow {
                    format,
                    w1,
                    w2,
                    report: evaluate(&spec, models, ds, req)?,
                });
            }
        }
    }
    Ok(rows)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Curve {
    ContinuousOnly,
    DiscreteOnly,
    Hybrid,
}

impl Curve {
    pub const ALL: [Curve; 3] = [Curve::ContinuousOnly, Curve::DiscreteOnly, Curve::Hybrid];

    pub fn weights(self, w: f64) -> (f64, f64) {
        match self {
            Curve::ContinuousOnly => (w, 1.0),
            Curve::DiscreteOnly => (1.0, w),
            Curve::Hybrid => (w, w),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Curve::ContinuousOnly => "continuous_only",
            Curve::DiscreteOnly => "discrete_only",
            Curve::Hybrid => "hybrid",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HierarchyRow {
    pub curve: Curve,
    pub w: f64,
    pub w1: f64,
    pub w2: f64,
    pub report: MetricReport,
}

/// Continuous-only, discrete-only and hybrid curves over a shared grid.
/// Points shared between curves are sampled once.
pub fn hierarchy(
    models: &ModelSet,
    ds: &Dataset,
    req: &SampleRequest,
    method: Method,
    format: DiscreteFormat,
    grid: &[f64],
) -> Result<Vec<HierarchyRow>, ExperimentError> {
    if !matches!(method, Method::Cfg | Method::Ag) {
        return Err(ExperimentError::Invalid(format!(
            "hierarchy needs a two-pass method, got {}",
            method.name()
        )));
    }
    let mut cache: BTreeMap<(u64, u64), MetricReport> = BTreeMap::new();
    let mut rows = Vec::new();
    for curve in Curve::ALL {
        for &w in grid {
            let (w1, w2) = curve.weights(w);
            let key = (w1.to_bits(), w2.to_bits());
            let report = match cache.get(&key) {
                Some(r) => r.clone(),
                None => {
                    let spec = GuidanceSpec {
                        method,
                        ..GuidanceSpec::cfg(format, w1, w2)
                    };
                    log::info!("hierarchy {} w={w}", curve.name());
                    let r = evaluate(&spec, models, ds, req)?;
                    cache.insert(key, r.clone());
                    r
                }
            };
            rows.push(HierarchyRow {
                curve,
                w,
                w1,
                w2,
                report,
            });
        }
    }
    Ok(rows)
}

/// Per-curve minimum MAE and the weight where it occurs (first on ties).
pub fn curve_optima(rows: &[HierarchyRow]) -> BTreeMap<Curve, (f64, f64)> {
    let mut best: BTreeMap<Curve, (f64, f64)> = BTreeMap::new();
    for r in rows {
        let e = best.entry(r.curve).or_insert((r.w, r.report.property_mae));
        if r.report.property_mae < e.1 {
            *e = (r.w, r.report.property_mae);
        }
    }
    best
}

/// Search box for tuning `method` with two or four weights.
pub fn tune_problem(method: Method, four_weights: bool, n_initial: usize, n_iterations: usize, seed: u64) -> BoProblem {
    let mut p = match method {
        Method::Ag => BoProblem::ag(seed),
        Method::Mg => BoProblem::mg(seed),
        _ => BoProblem::cfg(seed),
    };
    if four_weights && method != Method::Mg {
        let disc = p.bounds[1];
        p.bounds = vec![p.bounds[0], disc, disc, disc];
    }
    p.n_initial = n_initial;
    p.n_iterations = n_iterations;
    p
}

/// Spec for a point of the tuning box.
pub fn spec_for(method: Method, format: DiscreteFormat, w: &[f64]) -> Result<GuidanceSpec, ExperimentError> {
    match method {
        Method::Mg => Ok(GuidanceSpec::mg(w[0])),
        Method::Cfg | Method::Ag => {
            let weights = Weights::from_slice(w)
                .ok_or_else(|| ExperimentError::Invalid(format!("need 2 or 4 weights, got {}", w.len())))?;
            Ok(GuidanceSpec {
                method,
                weights,
                ..GuidanceSpec::cfg(format, 1.0, 1.0)
            })
        }
        Method::Vanilla => Err(ExperimentError::Invalid("vanilla has no weights to tune".into())),
    }
}

/// Bayesian optimization of the property MAE. Every evaluation reuses the
/// same sampling seed, so candidates are compared on common random numbers.
pub fn tune(
    models: &ModelSet,
    ds: &Dataset,
    req: &SampleRequest,
    method: Method,
    format: DiscreteFormat,
    problem: &BoProblem,
) -> Result<BoResult, ExperimentError> {
    if method == Method::Mg && models.mg.is_none() {
        return Err(ExperimentError::Invalid("model guidance needs trained tables".into()));
    }
    spec_for(method, format, &vec![1.0; problem.dim()])?;
    Ok(optimize(problem, |w: &[f64]| -> Result<f64, ExperimentError> {
        let spec = spec_for(method, format, w)?;
        let r = evaluate(&spec, models, ds, req)?;
        log::info!("tune {} {w:?} -> {:.4}", method.name(), r.property_mae);
        Ok(r.property_mae)
    })?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub steps: usize,
    pub label: String,
    pub spec: GuidanceSpec,
    pub report: MetricReport,
}

/// Every entry at every step count; radar scaling is applied per step count.
pub fn benchmark(
    models: &ModelSet,
    ds: &Dataset,
    req: &SampleRequest,
    entries: &[(String, GuidanceSpec)],
    steps: &[usize],
) -> Result<Vec<BenchRow>, ExperimentError> {
    let mut rows = Vec::new();
    for &s in steps {
        let grid = TimeGrid::new(s).map_err(|e| ExperimentError::Invalid(e.to_string()))?;
        let req = SampleRequest { grid, ..*req };
        let mut reports = Vec::new();
        for (label, spec) in entries {
            log::info!("benchmark {label} steps={s}");
            reports.push(evaluate(spec, models, ds, &req)?);
        }
        apply_radar(&mut reports);
        for ((label, spec), report) in entries.iter().zip(reports) {
            rows.push(BenchRow {
                steps: s,
                label: label.clone(),
                spec: *spec,
                report,
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoisers::{GuideModelSpec, MgConfig};
    use crate::toymol::generate_dataset;

    fn setup() -> (Dataset, ModelSet, SampleRequest) {
        let ds = generate_dataset(5, 300).unwrap();
        let models = ModelSet::fit(&ds, GuideModelSpec::default(), None).unwrap();
        let mut req = SampleRequest::new(6, 2);
        req.grid = TimeGrid::new(10).unwrap();
        (ds, models, req)
    }

    #[test]
    fn sweep_grid_sizes() {
        let (ds, models, req) = setup();
        let rows = sweep_formats(&models, &ds, &req).unwrap();
        assert_eq!(rows.len(), 100);
        for f in DiscreteFormat::ALL {
            let of: Vec<_> = rows.iter().filter(|r| r.format == f).collect();
            assert_eq!(of.len(), 25);
            let max_w2 = of.iter().map(|r| r.w2).fold(0.0, f64::max);
            assert_eq!(max_w2, if f == DiscreteFormat::LogRate { 1.2 } else { 3.0 });
        }
    }

    #[test]
    fn unit_weight_rows_agree_across_formats() {
        let (ds, models, req) = setup();
        let rows = sweep_formats(&models, &ds, &req).unwrap();
        let base: Vec<_> = rows.iter().filter(|r| r.w1 == 1.0 && r.w2 == 1.0).collect();
        assert_eq!(base.len(), 4);
        for r in &base[1..] {
            assert_eq!(r.report.property_mae, base[0].report.property_mae);
            assert_eq!(r.report.validity_ratio, base[0].report.validity_ratio);
        }
    }

    #[test]
    fn hierarchy_curves_meet_at_unit_weight() {
        let (ds, models, req) = setup();
        let rows = hierarchy(&models, &ds, &req, Method::Cfg, DiscreteFormat::LogProb, &[1.0, 2.0]).unwrap();
        assert_eq!(rows.len(), 6);
        let at_one: Vec<_> = rows.iter().filter(|r| r.w == 1.0).collect();
        assert!(at_one.iter().all(|r| r.report.property_mae == at_one[0].report.property_mae));
        let opt = curve_optima(&rows);
        assert_eq!(opt.len(), 3);
        assert!(hierarchy(&models, &ds, &req, Method::Mg, DiscreteFormat::LogProb, &[1.0]).is_err());
    }

    #[test]
    fn tune_trace_length_and_determinism() {
        let (ds, models, req) = setup();
        let p = tune_problem(Method::Cfg, false, 3, 2, 4);
        let a = tune(&models, &ds, &req, Method::Cfg, DiscreteFormat::LogProb, &p).unwrap();
        assert_eq!(a.trace.len(), 5);
        let b = tune(&models, &ds, &req, Method::Cfg, DiscreteFormat::LogProb, &p).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn four_weight_boxes() {
        let p = tune_problem(Method::Ag, true, 10, 40, 0);
        assert_eq!(p.bounds, vec![(1.0, 4.3), (1.0, 1.8), (1.0, 1.8), (1.0, 1.8)]);
        let p = tune_problem(Method::Mg, true, 5, 10, 0);
        assert_eq!(p.bounds.len(), 1);
        let s = spec_for(Method::Cfg, DiscreteFormat::LogProb, &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(s.weights.as_vec(), vec![1.0, 2.0, 3.0, 4.0]);
        assert!(spec_for(Method::Cfg, DiscreteFormat::LogProb, &[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn benchmark_records_forward_passes_and_radar() {
        let ds = generate_dataset(5, 300).unwrap();
        let mg = MgConfig {
            epochs: 1,
            warmup: 50,
            ..MgConfig::default()
        };
        let models = ModelSet::fit(&ds, GuideModelSpec::default(), Some(mg)).unwrap();
        let req = SampleRequest::new(5, 1);
        let entries = vec![
            ("vanilla".to_string(), GuidanceSpec::vanilla()),
            ("cfg".to_string(), GuidanceSpec::cfg(DiscreteFormat::LogProb, 1.5, 2.0)),
            ("ag".to_string(), GuidanceSpec::ag(DiscreteFormat::LogProb, 1.5, 1.5)),
            ("mg".to_string(), GuidanceSpec::mg(1.5)),
        ];
        let rows = benchmark(&models, &ds, &req, &entries, &[5, 10]).unwrap();
        assert_eq!(rows.len(), 8);
        let passes: Vec<u32> = rows[..4].iter().map(|r| r.report.forward_passes).collect();
        assert_eq!(passes, vec![1, 2, 2, 1]);
        for r in &rows {
            assert_eq!(r.report.scaled.len(), 4);
            assert!(r.report.scaled.values().all(|v| (0.0..=1.0).contains(v)));
        }
        assert_eq!(rows[0].report.scaled["efficiency"], 1.0);
        assert_eq!(rows[1].report.scaled["efficiency"], 0.0);
    }
}
