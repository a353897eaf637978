#![allow(dead_code)]

use serde::Deserialize;

#[derive(Deserialize)]
pub struct WelchCase {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub t: f64,
    pub p: f64,
}

#[derive(Deserialize)]
pub struct SmdCase {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub smd: f64,
}

#[derive(Deserialize)]
pub struct KsCase {
    pub x: Vec<f64>,
    pub d: f64,
    pub p: f64,
}

#[derive(Deserialize)]
pub struct CvmCase {
    pub x: Vec<f64>,
    pub omega: f64,
    pub p: f64,
}

#[derive(Deserialize)]
pub struct Reference {
    pub welch: Vec<WelchCase>,
    pub smd: Vec<SmdCase>,
    pub ks: Vec<KsCase>,
    pub cvm: Vec<CvmCase>,
}

pub const ORACLE_TOL: f64 = 1e-6;

pub fn reference() -> Reference {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/reference.json");
    let text = std::fs::read_to_string(path).expect("reference fixtures");
    serde_json::from_str(&text).expect("parse reference fixtures")
}

/// Largest absolute deviation over all fixtures, per tested quantity.
pub struct OracleErrors {
    pub welch_t: f64,
    pub welch_p: f64,
    pub smd: f64,
    pub ks_d: f64,
    pub ks_p: f64,
    pub cvm_omega: f64,
    pub cvm_p: f64,
}

fn close(actual: f64, expected: f64) -> f64 {
    if actual == expected {
        0.0
    } else {
        (actual - expected).abs()
    }
}

pub fn oracle_errors(r: &Reference) -> OracleErrors {
    use adlab::diagnostics::{cvm_uniform, ks_uniform, smd, welch_t};
    let mut e = OracleErrors {
        welch_t: 0.0,
        welch_p: 0.0,
        smd: 0.0,
        ks_d: 0.0,
        ks_p: 0.0,
        cvm_omega: 0.0,
        cvm_p: 0.0,
    };
    for c in &r.welch {
        let w = welch_t(&c.a, &c.b).unwrap();
        e.welch_t = e.welch_t.max(close(w.t, c.t));
        e.welch_p = e.welch_p.max(close(w.p, c.p));
    }
    for c in &r.smd {
        let s = smd(&c.a, &c.b).unwrap();
        e.smd = e.smd.max(close(s.value, c.smd));
    }
    for c in &r.ks {
        let g = ks_uniform(&c.x).unwrap();
        e.ks_d = e.ks_d.max(close(g.statistic, c.d));
        e.ks_p = e.ks_p.max(close(g.p, c.p));
    }
    for c in &r.cvm {
        let g = cvm_uniform(&c.x).unwrap();
        e.cvm_omega = e.cvm_omega.max(close(g.statistic, c.omega));
        e.cvm_p = e.cvm_p.max(close(g.p, c.p));
    }
    e
}
