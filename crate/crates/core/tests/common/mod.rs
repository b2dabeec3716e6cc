#![allow(dead_code)]

use std::path::PathBuf;

use kdlaplace::data::{generate, select, split, Example, GeneratorSpec};
use kdlaplace::distill::TrainingConfig;
use serde_json::Value;

/// Set to regenerate golden files instead of comparing against them.
pub const BLESS_ENV: &str = "KDLAPLACE_BLESS";

pub fn golden_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

/// Compares `actual` with the stored golden JSON; numbers may differ by
/// `tol` (absolute or relative), everything else must match exactly.
pub fn check_golden(name: &str, actual: &Value, tol: f64) {
    let path = golden_path(name);
    if std::env::var_os(BLESS_ENV).is_some() {
        let mut text = serde_json::to_string_pretty(actual).unwrap();
        text.push('\n');
        std::fs::write(&path, text).unwrap();
        return;
    }
    let text = std::fs::read_to_string(&path)
        .unwrap_or_else(|e| panic!("{}: {e} (run with {BLESS_ENV}=1 to create)", path.display()));
    let expected: Value = serde_json::from_str(&text).unwrap();
    if let Err(at) = close(&expected, actual, tol, "$") {
        panic!("{name} differs at {at}\nexpected: {expected}\nactual:   {actual}");
    }
}

fn close(a: &Value, b: &Value, tol: f64, at: &str) -> Result<(), String> {
    match (a, b) {
        (Value::Number(x), Value::Number(y)) => {
            let (x, y) = (x.as_f64().unwrap(), y.as_f64().unwrap());
            let scale = x.abs().max(y.abs()).max(1.0);
            if (x - y).abs() <= tol * scale {
                Ok(())
            } else {
                Err(format!("{at}: {x} vs {y}"))
            }
        }
        (Value::Array(x), Value::Array(y)) if x.len() == y.len() => x
            .iter()
            .zip(y)
            .enumerate()
            .try_for_each(|(i, (p, q))| close(p, q, tol, &format!("{at}[{i}]"))),
        (Value::Object(x), Value::Object(y)) if x.len() == y.len() => x.iter().try_for_each(|(k, p)| {
            let q = y.get(k).ok_or_else(|| format!("{at}.{k} missing"))?;
            close(p, q, tol, &format!("{at}.{k}"))
        }),
        _ if a == b => Ok(()),
        _ => Err(format!("{at}: {a} vs {b}")),
    }
}

/// The 2000-example set the golden runs use.
pub fn golden_spec() -> GeneratorSpec {
    GeneratorSpec {
        n: 2000,
        seed: 2024,
        ..Default::default()
    }
}

pub struct Splits {
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    pub test: Vec<Example>,
}

pub fn split_default(examples: &[Example], cfg: &TrainingConfig) -> Splits {
    let s = split(examples.len(), &cfg.split, cfg.seed).unwrap();
    Splits {
        train: select(examples, &s.train),
        val: select(examples, &s.val),
        test: select(examples, &s.test),
    }
}

pub fn golden_data() -> Vec<Example> {
    generate(&golden_spec()).unwrap()
}
