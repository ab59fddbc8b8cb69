//! Artifact formats: 17-significant-digit JSON and CSV, trace and summary
//! tables.

use std::io;

use bilevel_adapt::SolveReport;
use serde::Serialize;
use serde_json::ser::{Formatter, PrettyFormatter};

/// Writes every float with 17 significant digits so values round-trip.
pub fn fmt_num(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else if v.is_nan() {
        "NaN".into()
    } else if v > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

/// Pretty JSON formatter that prints floats as `d.dddddddddddddddde±x`.
pub struct RoundTripFormatter<'a> {
    inner: PrettyFormatter<'a>,
}

impl Default for RoundTripFormatter<'_> {
    fn default() -> Self {
        Self {
            inner: PrettyFormatter::new(),
        }
    }
}

impl Formatter for RoundTripFormatter<'_> {
    fn write_f32<W: ?Sized + io::Write>(&mut self, w: &mut W, value: f32) -> io::Result<()> {
        self.write_f64(w, f64::from(value))
    }

    fn write_f64<W: ?Sized + io::Write>(&mut self, w: &mut W, value: f64) -> io::Result<()> {
        write!(w, "{value:.16e}")
    }

    fn begin_array<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.inner.begin_array(w)
    }

    fn end_array<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.inner.end_array(w)
    }

    fn begin_array_value<W: ?Sized + io::Write>(
        &mut self,
        w: &mut W,
        first: bool,
    ) -> io::Result<()> {
        self.inner.begin_array_value(w, first)
    }

    fn end_array_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.inner.end_array_value(w)
    }

    fn begin_object<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.inner.begin_object(w)
    }

    fn end_object<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.inner.end_object(w)
    }

    fn begin_object_key<W: ?Sized + io::Write>(
        &mut self,
        w: &mut W,
        first: bool,
    ) -> io::Result<()> {
        self.inner.begin_object_key(w, first)
    }

    fn begin_object_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.inner.begin_object_value(w)
    }

    fn end_object_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.inner.end_object_value(w)
    }
}

pub fn to_json<T: Serialize + ?Sized>(value: &T) -> serde_json::Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, RoundTripFormatter::default());
    value.serialize(&mut ser)?;
    buf.push(b'\n');
    Ok(String::from_utf8(buf).expect("serde_json emits UTF-8"))
}

pub const TRACE_HEADER: &str = "t,a_next,hyper_norm,K_t,N_t,grad_f_cum,grad_g_cum,exact_grad_norm";

pub fn trace_csv(report: &SolveReport) -> String {
    let mut out = String::with_capacity(64 * (report.traces.len() + 1));
    out.push_str(TRACE_HEADER);
    out.push('\n');
    for tr in &report.traces {
        let exact = tr.exact_grad_norm.map(fmt_num).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            tr.t,
            fmt_num(tr.a_t_next),
            fmt_num(tr.hyper_norm),
            tr.k_t,
            tr.n_t,
            tr.grad_f_cum,
            tr.grad_g_cum,
            exact
        ));
    }
    out
}

pub const SUMMARY_HEADER: &str =
    "epsilon,T,total_grad_f,total_grad_g,best_hyper_norm,best_exact_norm,wall_seconds,status";

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub epsilon: f64,
    pub total_iters: usize,
    pub total_grad_f: u64,
    pub total_grad_g: u64,
    pub best_hyper_norm: Option<f64>,
    pub best_exact_norm: Option<f64>,
    pub wall_seconds: f64,
    /// `ok`, or a one-word failure kind.
    pub status: String,
}

impl SummaryRow {
    pub fn from_report(epsilon: f64, report: &SolveReport, status: &str) -> Self {
        Self {
            epsilon,
            total_iters: report.schedule.total_iters,
            total_grad_f: report.total_grad_f,
            total_grad_g: report.total_grad_g,
            best_hyper_norm: (!report.traces.is_empty()).then_some(report.best_hyper_norm),
            best_exact_norm: report.best_exact_norm(),
            wall_seconds: report.wall_time_seconds,
            status: status.to_string(),
        }
    }
}

/// Rows are written in descending `epsilon` order.
pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut rows: Vec<&SummaryRow> = rows.iter().collect();
    rows.sort_by(|a, b| b.epsilon.total_cmp(&a.epsilon));
    let mut out = String::from(SUMMARY_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            fmt_num(r.epsilon),
            r.total_iters,
            r.total_grad_f,
            r.total_grad_g,
            r.best_hyper_norm.map(fmt_num).unwrap_or_default(),
            r.best_exact_norm.map(fmt_num).unwrap_or_default(),
            fmt_num(r.wall_seconds),
            r.status
        ));
    }
    out
}
