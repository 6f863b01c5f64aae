//! A small linear/mixed-integer program container with a writer and reader
//! for the CPLEX LP text format.
//!
//! Only the subset of the format produced by [`LinearProgram::to_lp_string`]
//! is guaranteed to parse: one objective, named rows with `<=`, `>=` or `=`,
//! a `Bounds` section and a `Binaries` section.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{QsgError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VarKind {
    Continuous,
    Binary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Variable {
    pub name: String,
    pub lower: f64,
    pub upper: f64,
    pub kind: VarKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sense {
    Le,
    Ge,
    Eq,
}

impl Sense {
    fn symbol(self) -> &'static str {
        match self {
            Sense::Le => "<=",
            Sense::Ge => ">=",
            Sense::Eq => "=",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub name: String,
    pub terms: Vec<(usize, f64)>,
    pub sense: Sense,
    pub rhs: f64,
}

impl Row {
    pub fn activity(&self, values: &[f64]) -> f64 {
        self.terms.iter().map(|&(v, c)| c * values[v]).sum()
    }

    /// Amount by which `values` violates the row; zero when satisfied.
    pub fn violation(&self, values: &[f64]) -> f64 {
        let a = self.activity(values);
        match self.sense {
            Sense::Le => (a - self.rhs).max(0.0),
            Sense::Ge => (self.rhs - a).max(0.0),
            Sense::Eq => (a - self.rhs).abs(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearProgram {
    pub maximize: bool,
    pub vars: Vec<Variable>,
    pub objective: Vec<(usize, f64)>,
    pub rows: Vec<Row>,
}

const TERMS_PER_LINE: usize = 6;

fn push_terms(out: &mut String, terms: &[(usize, f64)], vars: &[Variable]) {
    for (i, &(v, c)) in terms.iter().enumerate() {
        if i > 0 && i % TERMS_PER_LINE == 0 {
            out.push_str("\n   ");
        }
        let sign = if c < 0.0 { '-' } else { '+' };
        if i == 0 && c >= 0.0 {
            write!(out, " {} {}", c, vars[v].name).unwrap();
        } else {
            write!(out, " {sign} {} {}", c.abs(), vars[v].name).unwrap();
        }
    }
    if terms.is_empty() {
        // a row needs at least one term; the first variable with weight 0
        write!(out, " 0 {}", vars[0].name).unwrap();
    }
}

impl LinearProgram {
    pub fn var_index(&self, name: &str) -> Option<usize> {
        self.vars.iter().position(|v| v.name == name)
    }

    pub fn objective_value(&self, values: &[f64]) -> f64 {
        self.objective.iter().map(|&(v, c)| c * values[v]).sum()
    }

    /// Largest violation over rows, bounds and integrality.
    pub fn max_violation(&self, values: &[f64]) -> f64 {
        let rows = self.rows.iter().map(|r| r.violation(values));
        let bounds = self.vars.iter().zip(values).map(|(v, &x)| {
            let b = (v.lower - x).max(x - v.upper).max(0.0);
            if v.kind == VarKind::Binary {
                b.max(x.min(1.0 - x).max(0.0))
            } else {
                b
            }
        });
        rows.chain(bounds).fold(0.0, f64::max)
    }

    /// Name and size of the worst-violated row, if any exceeds `tol`.
    pub fn first_violation(&self, values: &[f64], tol: f64) -> Option<(String, f64)> {
        for r in &self.rows {
            let v = r.violation(values);
            if v > tol {
                return Some((r.name.clone(), v));
            }
        }
        for (var, &x) in self.vars.iter().zip(values) {
            let mut v = (var.lower - x).max(x - var.upper);
            if var.kind == VarKind::Binary {
                v = v.max(x.min(1.0 - x));
            }
            if v > tol {
                return Some((var.name.clone(), v));
            }
        }
        None
    }

    pub fn to_lp_string(&self) -> String {
        let mut out = String::new();
        out.push_str(if self.maximize { "Maximize\n" } else { "Minimize\n" });
        out.push_str(" obj:");
        push_terms(&mut out, &self.objective, &self.vars);
        out.push_str("\nSubject To\n");
        for r in &self.rows {
            write!(out, " {}:", r.name).unwrap();
            push_terms(&mut out, &r.terms, &self.vars);
            writeln!(out, " {} {}", r.sense.symbol(), r.rhs).unwrap();
        }
        out.push_str("Bounds\n");
        for v in &self.vars {
            if v.kind == VarKind::Continuous && !(v.lower == 0.0 && v.upper == f64::INFINITY) {
                if v.upper == f64::INFINITY {
                    writeln!(out, " {} >= {}", v.name, v.lower).unwrap();
                } else {
                    writeln!(out, " {} <= {} <= {}", v.lower, v.name, v.upper).unwrap();
                }
            }
        }
        let bins: Vec<&str> = self
            .vars
            .iter()
            .filter(|v| v.kind == VarKind::Binary)
            .map(|v| v.name.as_str())
            .collect();
        if !bins.is_empty() {
            out.push_str("Binaries\n");
            for chunk in bins.chunks(10) {
                writeln!(out, " {}", chunk.join(" ")).unwrap();
            }
        }
        out.push_str("End\n");
        out
    }

    pub fn write_lp(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_lp_string())?;
        Ok(())
    }

    pub fn read_lp(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        parse_lp(&text).map_err(|message| QsgError::Parse { path: path.to_path_buf(), message })
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Section {
    Objective,
    Constraints,
    Bounds,
    Binaries,
    Done,
}

fn section_header(line: &str) -> Option<Section> {
    match line.to_ascii_lowercase().as_str() {
        "maximize" | "maximum" | "max" | "minimize" | "minimum" | "min" => Some(Section::Objective),
        "subject to" | "such that" | "st" | "s.t." => Some(Section::Constraints),
        "bounds" | "bound" => Some(Section::Bounds),
        "binaries" | "binary" | "bin" => Some(Section::Binaries),
        "end" => Some(Section::Done),
        _ => None,
    }
}

struct Builder {
    vars: Vec<Variable>,
    index: HashMap<String, usize>,
}

impl Builder {
    fn var(&mut self, name: &str) -> usize {
        if let Some(&i) = self.index.get(name) {
            return i;
        }
        self.index.insert(name.to_string(), self.vars.len());
        self.vars.push(Variable {
            name: name.to_string(),
            lower: 0.0,
            upper: f64::INFINITY,
            kind: VarKind::Continuous,
        });
        self.vars.len() - 1
    }
}

fn parse_number(tok: &str) -> Option<f64> {
    match tok.to_ascii_lowercase().as_str() {
        "inf" | "+inf" | "infinity" | "+infinity" => Some(f64::INFINITY),
        "-inf" | "-infinity" => Some(f64::NEG_INFINITY),
        _ => tok.parse().ok(),
    }
}

/// Parses `[name:] expr [sense rhs]` where expr is a sum of `[coef] var`.
fn parse_expression(
    b: &mut Builder,
    text: &str,
) -> std::result::Result<(Option<String>, Vec<(usize, f64)>, Option<(Sense, f64)>), String> {
    let (name, body) = match text.split_once(':') {
        Some((n, rest)) => (Some(n.trim().to_string()), rest),
        None => (None, text),
    };
    let spaced = body
        .replace("<=", " <= ")
        .replace(">=", " >= ")
        .replace("=<", " <= ")
        .replace("=>", " >= ");
    let mut tokens: Vec<String> = Vec::new();
    for tok in spaced.split_whitespace() {
        if tok != "<=" && tok != ">=" && tok.contains('=') {
            tokens.extend(tok.replace('=', " = ").split_whitespace().map(str::to_string));
        } else {
            tokens.push(tok.to_string());
        }
    }
    let mut terms = Vec::new();
    let mut sign = 1.0;
    let mut coef: Option<f64> = None;
    let mut i = 0;
    while i < tokens.len() {
        let t = tokens[i].as_str();
        match t {
            "+" => sign = 1.0,
            "-" => sign = -sign,
            "<=" | ">=" | "=" => {
                let sense = match t {
                    "<=" => Sense::Le,
                    ">=" => Sense::Ge,
                    _ => Sense::Eq,
                };
                let rhs_tok = tokens.get(i + 1).ok_or("missing right-hand side")?;
                let rhs = parse_number(rhs_tok).ok_or_else(|| format!("bad right-hand side `{rhs_tok}`"))?;
                if i + 2 != tokens.len() {
                    return Err(format!("unexpected tokens after `{rhs_tok}`"));
                }
                return Ok((name, terms, Some((sense, rhs))));
            }
            _ => {
                if let Some(c) = parse_number(t) {
                    coef = Some(coef.unwrap_or(1.0) * c);
                } else {
                    let v = b.var(t);
                    terms.push((v, sign * coef.unwrap_or(1.0)));
                    sign = 1.0;
                    coef = None;
                }
            }
        }
        i += 1;
    }
    Ok((name, terms, None))
}

/// Reads a program in the LP text format.
pub fn parse_lp(text: &str) -> std::result::Result<LinearProgram, String> {
    let mut b = Builder { vars: Vec::new(), index: HashMap::new() };
    let mut maximize = None;
    let mut objective = Vec::new();
    let mut rows = Vec::new();
    let mut section: Option<Section> = None;
    let mut pending = String::new();
    let mut pending_line = 0;

    let flush = |b: &mut Builder,
                     pending: &mut String,
                     section: Option<Section>,
                     line: usize,
                     objective: &mut Vec<(usize, f64)>,
                     rows: &mut Vec<Row>|
     -> std::result::Result<(), String> {
        if pending.trim().is_empty() {
            pending.clear();
            return Ok(());
        }
        let at = |e: String| format!("line {line}: {e}");
        match section {
            Some(Section::Objective) => {
                let (_, terms, rel) = parse_expression(b, pending).map_err(at)?;
                if rel.is_some() {
                    return Err(at("objective cannot have a relation".into()));
                }
                objective.extend(terms);
            }
            Some(Section::Constraints) => {
                let (name, terms, rel) = parse_expression(b, pending).map_err(at)?;
                let (sense, rhs) = rel.ok_or_else(|| at("constraint without relation".into()))?;
                rows.push(Row {
                    name: name.unwrap_or_else(|| format!("R{}", rows.len() + 1)),
                    terms,
                    sense,
                    rhs,
                });
            }
            _ => {}
        }
        pending.clear();
        Ok(())
    };

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.split('\\').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(s) = section_header(line) {
            flush(&mut b, &mut pending, section, pending_line, &mut objective, &mut rows)?;
            if s == Section::Objective {
                maximize = Some(line.to_ascii_lowercase().starts_with("max"));
            }
            section = Some(s);
            if s == Section::Done {
                break;
            }
            continue;
        }
        match section {
            None => return Err(format!("line {line_no}: expected an objective sense")),
            Some(Section::Objective) | Some(Section::Constraints) => {
                // a new row starts with `name:`; otherwise the line continues
                let starts_row = line
                    .split_once(':')
                    .is_some_and(|(n, _)| !n.trim().is_empty() && !n.contains(char::is_whitespace));
                let relation_pending = ["<", ">", "="].iter().any(|s| pending.contains(s));
                if starts_row || (section == Some(Section::Constraints) && relation_pending) {
                    flush(&mut b, &mut pending, section, pending_line, &mut objective, &mut rows)?;
                }
                if pending.is_empty() {
                    pending_line = line_no;
                }
                pending.push(' ');
                pending.push_str(line);
            }
            Some(Section::Bounds) => parse_bound(&mut b, line).map_err(|e| format!("line {line_no}: {e}"))?,
            Some(Section::Binaries) => {
                for name in line.split_whitespace() {
                    let v = b.var(name);
                    let var = &mut b.vars[v];
                    var.kind = VarKind::Binary;
                    var.lower = 0.0;
                    var.upper = 1.0;
                }
            }
            Some(Section::Done) => break,
        }
    }
    flush(&mut b, &mut pending, section, pending_line, &mut objective, &mut rows)?;
    let maximize = maximize.ok_or("missing objective section")?;
    Ok(LinearProgram { maximize, vars: b.vars, objective, rows })
}

fn parse_bound(b: &mut Builder, line: &str) -> std::result::Result<(), String> {
    let toks: Vec<&str> = line.split_whitespace().collect();
    match toks.as_slice() {
        [name, free] if free.eq_ignore_ascii_case("free") => {
            let v = b.var(name);
            b.vars[v].lower = f64::NEG_INFINITY;
            b.vars[v].upper = f64::INFINITY;
        }
        [lo, "<=", name, "<=", hi] => {
            let (lo, hi) = (parse_number(lo).ok_or("bad lower bound")?, parse_number(hi).ok_or("bad upper bound")?);
            let v = b.var(name);
            b.vars[v].lower = lo;
            b.vars[v].upper = hi;
        }
        [name, op, val] if parse_number(name).is_none() => {
            let x = parse_number(val).ok_or("bad bound value")?;
            let v = b.var(name);
            match *op {
                "<=" => b.vars[v].upper = x,
                ">=" => b.vars[v].lower = x,
                "=" => {
                    b.vars[v].lower = x;
                    b.vars[v].upper = x;
                }
                _ => return Err(format!("bad bound operator `{op}`")),
            }
        }
        [val, op, name] => {
            let x = parse_number(val).ok_or("bad bound value")?;
            let v = b.var(name);
            match *op {
                "<=" => b.vars[v].lower = x,
                ">=" => b.vars[v].upper = x,
                "=" => {
                    b.vars[v].lower = x;
                    b.vars[v].upper = x;
                }
                _ => return Err(format!("bad bound operator `{op}`")),
            }
        }
        _ => return Err(format!("cannot parse bound `{line}`")),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> LinearProgram {
        let var = |name: &str, upper, kind| Variable { name: name.into(), lower: 0.0, upper, kind };
        LinearProgram {
            maximize: true,
            vars: vec![
                var("a", 1.0, VarKind::Binary),
                var("b", 0.25, VarKind::Continuous),
                var("c", f64::INFINITY, VarKind::Continuous),
            ],
            objective: vec![(0, 3.5), (1, -0.125), (2, 1e-7)],
            rows: vec![
                Row { name: "r1".into(), terms: vec![(0, 1.0), (1, -2.0)], sense: Sense::Le, rhs: 0.5 },
                Row { name: "r2".into(), terms: vec![(2, 1.0), (0, 1.0)], sense: Sense::Ge, rhs: -3.0 },
                Row { name: "r3".into(), terms: vec![(1, 4.0)], sense: Sense::Eq, rhs: 1.0 },
            ],
        }
    }

    #[test]
    fn round_trip() {
        let lp = sample();
        let text = lp.to_lp_string();
        let back = parse_lp(&text).unwrap();
        assert_eq!(back, lp);
        assert_eq!(back.to_lp_string(), text);
    }

    #[test]
    fn parses_hand_written_variants() {
        let text = "\\ comment\nMinimize\n obj: x + 2 y\n - 3 z\nSubject To\n c1: x + y >= 1\n c2: 2 x - z\n   <= 4\n y - z = 0\nBounds\n x <= 5\n -1 <= z <= 1\n y free\nBinary\n w\nEnd\n";
        let lp = parse_lp(text).unwrap();
        assert!(!lp.maximize);
        assert_eq!(lp.objective.len(), 3);
        assert_eq!(lp.rows.len(), 3);
        assert_eq!(lp.rows[1].terms, vec![(0, 2.0), (2, -1.0)]);
        assert_eq!(lp.rows[2].name, "R3");
        let y = lp.var_index("y").unwrap();
        assert_eq!(lp.vars[y].lower, f64::NEG_INFINITY);
        assert_eq!(lp.vars[lp.var_index("w").unwrap()].kind, VarKind::Binary);
    }

    #[test]
    fn violations() {
        let lp = sample();
        assert_eq!(lp.max_violation(&[1.0, 0.25, 0.0]), 0.0);
        assert!(lp.max_violation(&[0.5, 0.25, 0.0]) >= 0.5);
        assert_eq!(lp.first_violation(&[1.0, 0.0, 0.0], 1e-9).unwrap().0, "r1");
    }

    #[test]
    fn errors_carry_line_numbers() {
        let err = parse_lp("Maximize\n obj: x\nSubject To\n c: x <= abc\nEnd\n").unwrap_err();
        assert!(err.starts_with("line 4"), "{err}");
        assert!(parse_lp("x + y\n").is_err());
    }
}
