use std::fmt;
use std::io::Write;

/// Acceptance rule of a check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Tolerance {
    /// Max absolute error must be `≤` the bound.
    Abs(f64),
    /// Max relative error must be `<` the bound.
    Rel(f64),
    /// Results must agree bit for bit.
    Exact,
}

impl fmt::Display for Tolerance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tolerance::Abs(t) => write!(f, "abs<={t:e}"),
            Tolerance::Rel(t) => write!(f, "rel<{t:e}"),
            Tolerance::Exact => f.write_str("exact"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub name: String,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    pub tolerance: Tolerance,
    /// Randomized cases evaluated.
    pub cases: usize,
    /// Cases that violated a discrete property (bitwise equality, partition).
    pub failures: usize,
    pub pass: bool,
    /// Base seed; case `i` uses `seed + i`.
    pub seed: u64,
    pub config: String,
    pub notes: Vec<String>,
}

impl CheckReport {
    pub fn new(name: impl Into<String>, tolerance: Tolerance, seed: u64, config: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            max_abs_err: 0.0,
            max_rel_err: 0.0,
            tolerance,
            cases: 0,
            failures: 0,
            pass: true,
            seed,
            config: config.into(),
            notes: Vec::new(),
        }
    }

    /// Folds one case's errors into the maxima.
    pub fn observe(&mut self, abs: f64, rel: f64) {
        self.cases += 1;
        // f64::max drops NaN operands, so a NaN is kept explicitly
        let fold = |cur: f64, v: f64| if cur.is_nan() || v.is_nan() { f64::NAN } else { cur.max(v) };
        self.max_abs_err = fold(self.max_abs_err, abs);
        self.max_rel_err = fold(self.max_rel_err, rel);
    }

    pub fn fail_case(&mut self, note: impl Into<String>) {
        self.failures += 1;
        if self.failures <= 5 {
            self.notes.push(note.into());
        }
    }

    pub fn error(&mut self, note: impl Into<String>) {
        self.failures += 1;
        self.notes.push(note.into());
    }

    pub fn note(&mut self, note: impl Into<String>) {
        self.notes.push(note.into());
    }

    /// Sets `pass` from the recorded errors and returns the report.
    pub fn finish(mut self) -> Self {
        let within = match self.tolerance {
            Tolerance::Abs(t) => self.max_abs_err <= t,
            Tolerance::Rel(t) => self.max_rel_err < t,
            Tolerance::Exact => self.max_abs_err == 0.0,
        };
        self.pass = within && self.failures == 0;
        self
    }

    /// One line: status, name, errors, tolerance, cases and seed.
    pub fn line(&self) -> String {
        format!(
            "{} {} max_abs={:.3e} max_rel={:.3e} tol={} cases={} failures={} seed={} [{}]",
            if self.pass { "PASS" } else { "FAIL" },
            self.name,
            self.max_abs_err,
            self.max_rel_err,
            self.tolerance,
            self.cases,
            self.failures,
            self.seed,
            self.config
        )
    }
}

/// Report lines followed by indented notes and a final tally.
pub fn render_text(reports: &[CheckReport]) -> String {
    let mut out = String::new();
    for r in reports {
        out.push_str(&r.line());
        out.push('\n');
        for n in &r.notes {
            out.push_str("    ");
            out.push_str(n);
            out.push('\n');
        }
    }
    let passed = reports.iter().filter(|r| r.pass).count();
    out.push_str(&format!("{passed}/{} checks passed\n", reports.len()));
    out
}

pub const SUMMARY_HEADER: [&str; 6] = ["name", "pass", "max_abs_err", "max_rel_err", "cases", "seed"];

pub fn write_summary<W: Write>(reports: &[CheckReport], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SUMMARY_HEADER)?;
    for r in reports {
        w.write_record([
            r.name.clone(),
            r.pass.to_string(),
            format!("{:e}", r.max_abs_err),
            format!("{:e}", r.max_rel_err),
            r.cases.to_string(),
            r.seed.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
