//! Application processing level: computed variables and reports.
//!
//! A computed variable is registered and written through the ordinary
//! [`PlantStore`] calls, so every consumer sees it exactly like a measured
//! one. Inputs are aligned by latest value; there is no interpolation.

pub mod expr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use expr::{BinOp, EvalError, Expr, SyntaxError};

use crate::rtdb::{Millis, PlantStore, Quality, Sample, StoreError, TrendPoint, VariableKind};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComputedVariableDef {
    pub output: String,
    pub inputs: Vec<String>,
    pub expr: String,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AppError {
    #[error(transparent)]
    Syntax(#[from] SyntaxError),
    #[error("expression references {0:?}, which is not a declared input")]
    UnknownIdentifier(String),
    #[error("input {0:?} is not registered")]
    UnknownInput(String),
    #[error("variable {0:?} is already registered")]
    DuplicateName(String),
    #[error("expression divides by a constant zero")]
    DivisionByConstantZero,
    #[error("evaluation of {output:?} failed: {source}")]
    Eval { output: String, source: EvalError },
    #[error(transparent)]
    Store(StoreError),
}

impl From<StoreError> for AppError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::DuplicateName(n) => AppError::DuplicateName(n),
            other => AppError::Store(other),
        }
    }
}

/// A validated, registered computed variable.
#[derive(Debug, Clone, PartialEq)]
pub struct ComputedHandle {
    def: ComputedVariableDef,
    expr: Expr,
}

impl ComputedHandle {
    pub fn output(&self) -> &str {
        &self.def.output
    }

    pub fn inputs(&self) -> &[String] {
        &self.def.inputs
    }

    pub fn def(&self) -> &ComputedVariableDef {
        &self.def
    }

    pub fn expr(&self) -> &Expr {
        &self.expr
    }
}

/// Checks everything that does not need a store.
pub fn compile(def: &ComputedVariableDef) -> Result<Expr, AppError> {
    let expr = Expr::parse(&def.expr)?;
    if let Some(id) = expr
        .identifiers()
        .into_iter()
        .find(|id| !def.inputs.iter().any(|i| i == id))
    {
        return Err(AppError::UnknownIdentifier(id.to_owned()));
    }
    if expr.divides_by_constant_zero() {
        return Err(AppError::DivisionByConstantZero);
    }
    Ok(expr)
}

/// Validates `def` against `store` and registers its output as a computed
/// variable. Nothing is registered when an error is returned.
pub fn define_computed<S: PlantStore>(
    def: &ComputedVariableDef,
    store: &S,
) -> Result<ComputedHandle, AppError> {
    let expr = compile(def)?;
    for input in &def.inputs {
        match store.latest(input) {
            Ok(_) => {}
            Err(StoreError::UnknownVariable(_)) => return Err(AppError::UnknownInput(input.clone())),
            Err(e) => return Err(e.into()),
        }
    }
    store.register(&def.output, VariableKind::Computed)?;
    Ok(ComputedHandle {
        def: def.clone(),
        expr,
    })
}

/// Like [`define_computed`] for an output that is already registered,
/// e.g. by an earlier run against the same historian.
pub fn attach_computed<S: PlantStore>(
    def: &ComputedVariableDef,
    store: &S,
) -> Result<ComputedHandle, AppError> {
    let expr = compile(def)?;
    for name in def.inputs.iter().chain([&def.output]) {
        match store.latest(name) {
            Ok(_) => {}
            Err(StoreError::UnknownVariable(_)) => return Err(AppError::UnknownInput(name.clone())),
            Err(e) => return Err(e.into()),
        }
    }
    Ok(ComputedHandle {
        def: def.clone(),
        expr,
    })
}

/// Evaluates over the latest input values and inserts the result stamped
/// `now`, with the worst input quality. Returns `None` (and stores nothing)
/// while some input has no data or when the store refuses the sample as
/// too old.
pub fn eval_computed<S: PlantStore>(
    handle: &ComputedHandle,
    store: &S,
    now: Millis,
) -> Result<Option<Sample>, AppError> {
    let mut values = Vec::with_capacity(handle.def.inputs.len());
    let mut quality = Quality::Good;
    for input in &handle.def.inputs {
        let Some(s) = store.latest(input)? else {
            return Ok(None);
        };
        quality = quality.max(s.quality);
        values.push((input.as_str(), s.value));
    }
    let value = handle
        .expr
        .eval(&|name| values.iter().find(|(n, _)| *n == name).map(|(_, v)| *v))
        .map_err(|source| AppError::Eval {
            output: handle.def.output.clone(),
            source,
        })?;
    let sample = Sample {
        variable: handle.def.output.clone(),
        timestamp: now,
        value,
        quality,
    };
    Ok(store.insert(sample.clone())?.then_some(sample))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatusData {
    pub value: f64,
    pub timestamp: Millis,
    pub age_ms: Millis,
    pub quality: Quality,
}

/// `data` is `null` for a variable without samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatusRow {
    pub variable: String,
    pub data: Option<StatusData>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatusReport {
    pub generated_at: Millis,
    pub rows: Vec<StatusRow>,
}

/// One row per variable, in the order given. A sample stamped after `now`
/// reports age 0.
pub fn status_snapshot<S: PlantStore>(
    variables: &[&str],
    store: &S,
    now: Millis,
) -> Result<StatusReport, StoreError> {
    let rows = variables
        .iter()
        .map(|&v| {
            Ok(StatusRow {
                variable: v.to_owned(),
                data: store.latest(v)?.map(|s| StatusData {
                    value: s.value,
                    timestamp: s.timestamp,
                    age_ms: now.saturating_sub(s.timestamp),
                    quality: s.quality,
                }),
            })
        })
        .collect::<Result<_, StoreError>>()?;
    Ok(StatusReport {
        generated_at: now,
        rows,
    })
}

/// Aggregates over trend points. `min`, `max` and `mean` are `null` when
/// `total_count` is 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UsageReport {
    pub variable: String,
    pub t0: Millis,
    pub t1: Millis,
    pub total_count: u64,
    pub min: Option<f64>,
    pub max: Option<f64>,
    pub mean: Option<f64>,
}

/// Combines trend points; the mean is weighted by each point's count.
pub fn usage_from_points(variable: &str, t0: Millis, t1: Millis, points: &[TrendPoint]) -> UsageReport {
    let mut total = 0u64;
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    // Neumaier summation of mean_i * count_i.
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for p in points.iter().filter(|p| p.count > 0) {
        total += p.count;
        min = min.min(p.min);
        max = max.max(p.max);
        let x = p.mean * p.count as f64;
        let t = sum + x;
        comp += if sum.abs() >= x.abs() {
            (sum - t) + x
        } else {
            (x - t) + sum
        };
        sum = t;
    }
    let (min, max, mean) = if total == 0 {
        (None, None, None)
    } else {
        let mean = ((sum + comp) / total as f64).clamp(min, max);
        (Some(min), Some(max), Some(mean))
    };
    UsageReport {
        variable: variable.to_owned(),
        t0,
        t1,
        total_count: total,
        min,
        max,
        mean,
    }
}

/// Usage statistics from the store's trend view over `[t0, t1)`: persisted
/// trends plus the in-memory rollup.
pub fn period_report<S: PlantStore>(
    variable: &str,
    t0: Millis,
    t1: Millis,
    store: &S,
) -> Result<UsageReport, StoreError> {
    let points = store.trend(variable, t0, t1)?;
    Ok(usage_from_points(variable, t0, t1, &points))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rtdb::{RealTimeDb, RetentionPolicy};

    fn db() -> RealTimeDb {
        let db = RealTimeDb::new(RetentionPolicy::default());
        db.register("a", VariableKind::Raw).unwrap();
        db.register("b", VariableKind::Raw).unwrap();
        db
    }

    fn def(output: &str, inputs: &[&str], expr: &str) -> ComputedVariableDef {
        ComputedVariableDef {
            output: output.into(),
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
            expr: expr.into(),
        }
    }

    #[test]
    fn define_registers_computed_output() {
        let db = db();
        let h = define_computed(&def("sum", &["a", "b"], "a+b"), &db).unwrap();
        assert_eq!(db.variable_count(), 3);
        assert_eq!(db.variable("sum").unwrap().kind(), VariableKind::Computed);
        assert_eq!(h.output(), "sum");
    }

    #[test]
    fn define_errors_register_nothing() {
        let db = db();
        let cases = [
            (def("x", &["a", "b"], "a + c"), AppError::UnknownIdentifier("c".into())),
            (def("a", &["b"], "b"), AppError::DuplicateName("a".into())),
            (def("x", &["a", "zz"], "a"), AppError::UnknownInput("zz".into())),
            (def("x", &["a"], "a / (2 - 2)"), AppError::DivisionByConstantZero),
            (def("x", &["x"], "x"), AppError::UnknownInput("x".into())),
        ];
        for (d, want) in cases {
            assert_eq!(define_computed(&d, &db).unwrap_err(), want);
        }
        assert!(matches!(
            define_computed(&def("x", &["a"], "a +"), &db),
            Err(AppError::Syntax(SyntaxError { position: 3, .. }))
        ));
        assert_eq!(db.variable_count(), 2);
    }

    #[test]
    fn eval_uses_latest_and_now() {
        let db = db();
        let h = define_computed(&def("sum", &["a", "b"], "a+b"), &db).unwrap();
        assert_eq!(eval_computed(&h, &db, 5).unwrap(), None);
        db.insert(Sample::new("a", 10, 2.0)).unwrap();
        assert_eq!(eval_computed(&h, &db, 11).unwrap(), None);
        assert_eq!(db.len_of("sum").unwrap(), 0);
        db.insert(Sample::new("b", 12, 3.0).with_quality(Quality::Uncertain))
            .unwrap();
        let s = eval_computed(&h, &db, 15).unwrap().unwrap();
        assert_eq!(s, Sample::new("sum", 15, 5.0).with_quality(Quality::Uncertain));
        assert_eq!(db.latest("sum").unwrap(), Some(s));
    }

    #[test]
    fn eval_error_stores_nothing() {
        let db = db();
        let h = define_computed(&def("q", &["a", "b"], "a/b"), &db).unwrap();
        db.insert(Sample::new("a", 1, 1.0)).unwrap();
        db.insert(Sample::new("b", 1, 0.0)).unwrap();
        assert!(matches!(
            eval_computed(&h, &db, 2),
            Err(AppError::Eval {
                source: EvalError::DivisionByZero,
                ..
            })
        ));
        assert_eq!(db.len_of("q").unwrap(), 0);
    }

    #[test]
    fn status_rows() {
        let db = db();
        db.insert(Sample::new("a", 100, 1.0)).unwrap();
        let r = status_snapshot(&["a", "b"], &db, 250).unwrap();
        assert_eq!(r.rows[0].data.as_ref().unwrap().age_ms, 150);
        assert_eq!(r.rows[1].data, None);
        let json = serde_json::to_string(&r.rows[1]).unwrap();
        assert_eq!(json, r#"{"variable":"b","data":null}"#);
        assert!(status_snapshot(&[], &db, 0).unwrap().rows.is_empty());
        assert_eq!(
            status_snapshot(&["nope"], &db, 0).unwrap_err(),
            StoreError::UnknownVariable("nope".into())
        );
    }

    #[test]
    fn usage_weighting() {
        let p = |start, min, max, mean, count| TrendPoint {
            variable: "v".into(),
            interval_start_ms: start,
            interval_len_ms: 60_000,
            min,
            max,
            mean,
            count,
        };
        let r = usage_from_points("v", 0, 120_000, &[p(0, 1.0, 3.0, 2.0, 2), p(60_000, 0.0, 4.0, 2.0, 2)]);
        assert_eq!((r.total_count, r.min, r.max, r.mean), (4, Some(0.0), Some(4.0), Some(2.0)));
        let r = usage_from_points("v", 0, 1, &[p(0, 1.0, 1.0, 1.0, 1), p(60_000, 4.0, 4.0, 4.0, 3)]);
        assert_eq!(r.mean, Some(3.25));
        let empty = usage_from_points("v", 0, 1, &[]);
        assert_eq!((empty.total_count, empty.min, empty.mean), (0, None, None));
        let db = db();
        assert_eq!(period_report("a", 0, 1000, &db).unwrap().total_count, 0);
        assert!(matches!(
            period_report("a", 5, 1, &db),
            Err(StoreError::InvalidRange { .. })
        ));
    }
}
