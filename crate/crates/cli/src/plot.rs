//! Gnuplot-ready columns for fields and continuation certificates. No plotting here.

use std::fmt::Write as _;
use std::path::Path;

use mfgmaster::grid::read_field;
use mfgmaster::models::{EntryExitLevel, GradientBound};
use mfgmaster::stopping::ContinuationCertificate;
use mfgmaster::GridField;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Certificate file written by the entry-exit mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntryExitCertificate {
    pub levels: Vec<EntryExitLevel>,
    pub gradient: GradientBound,
}

#[derive(Debug, Clone, Default)]
pub struct SliceSpec {
    /// `(axis, value)` pairs, axes 1-based.
    pub fix: Vec<(usize, f64)>,
    /// Time slice; the last one when absent.
    pub time: Option<usize>,
    /// Single value component (1-based); all when absent.
    pub component: Option<usize>,
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// Columns `free coordinates..., U components...`. Two free coordinates are written as
/// gnuplot blocks separated by blank lines.
pub fn field_columns(field: &GridField, spec: &SliceSpec) -> Result<String, CliError> {
    let grid = field.grid();
    let d = grid.dim();
    let h = grid.spacing();
    for &(axis, value) in &spec.fix {
        if axis == 0 || axis > d {
            return Err(usage(format!("slice axis {axis} outside 1..={d}")));
        }
        if !(0.0..=grid.radius() + 0.5 * h).contains(&value) {
            return Err(usage(format!("slice value {value} outside [0, {}]", grid.radius())));
        }
    }
    let free: Vec<usize> = (0..d).filter(|k| !spec.fix.iter().any(|(a, _)| a - 1 == *k)).collect();
    if free.len() > 2 {
        return Err(usage(format!(
            "a {d}-dimensional field needs slice directives fixing all but two coordinates"
        )));
    }
    if free.is_empty() {
        return Err(usage("slice directives fix every coordinate"));
    }
    let s = spec.time.unwrap_or(field.n_slices() - 1);
    if s >= field.n_slices() {
        return Err(usage(format!("time slice {s} outside 0..{}", field.n_slices())));
    }
    let comps: Vec<usize> = match spec.component {
        Some(c) if c == 0 || c > d => return Err(usage(format!("component {c} outside 1..={d}"))),
        Some(c) => vec![c - 1],
        None => (0..d).collect(),
    };

    let mut nodes: Vec<usize> = (0..grid.len())
        .filter(|&n| spec.fix.iter().all(|&(a, v)| (grid.node(n)[a - 1] - v).abs() <= 0.5 * h))
        .collect();
    nodes.sort_by_key(|&n| free.iter().map(|&k| grid.lattice(n)[k]).collect::<Vec<_>>());

    let mut out = String::from("#");
    for &k in &free {
        let _ = write!(out, " x_{}", k + 1);
    }
    for &c in &comps {
        let _ = write!(out, " U_{}", c + 1);
    }
    out.push('\n');
    let mut block = None;
    for n in nodes {
        if free.len() == 2 {
            let b = grid.lattice(n)[free[0]];
            if block.is_some_and(|p| p != b) {
                out.push('\n');
            }
            block = Some(b);
        }
        let x = grid.node(n);
        let u = field.value(s, n);
        let row: Vec<String> = free
            .iter()
            .map(|&k| x[k].to_string())
            .chain(comps.iter().map(|&c| u[c].to_string()))
            .collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    Ok(out)
}

pub fn stopping_columns(cert: &ContinuationCertificate) -> String {
    let mut out = String::from("# eps max_positive_part grad_norm residual\n");
    for l in &cert.levels {
        let _ = writeln!(out, "{} {} {} {}", l.eps, l.max_positive_part, l.grad_norm, l.residual);
    }
    out
}

pub fn entry_exit_columns(cert: &EntryExitCertificate) -> String {
    let mut out = String::from("# eps above below grad_norm residual\n");
    for l in &cert.levels {
        let _ = writeln!(out, "{} {} {} {} {}", l.eps, l.above, l.below, l.grad_norm, l.residual);
    }
    out
}

/// Reads a field file (CSV or binary) or a certificate JSON and writes its columns to `out`.
pub fn emit_plotdata(input: &Path, out: &Path, spec: &SliceSpec) -> Result<(), CliError> {
    let is_json = input.extension().is_some_and(|e| e == "json");
    let text = if is_json {
        let raw = std::fs::read_to_string(input)?;
        if let Ok(c) = serde_json::from_str::<ContinuationCertificate>(&raw) {
            stopping_columns(&c)
        } else if let Ok(c) = serde_json::from_str::<EntryExitCertificate>(&raw) {
            entry_exit_columns(&c)
        } else {
            return Err(usage(format!("{} is not a continuation certificate", input.display())));
        }
    } else {
        let field = read_field(input).map_err(|e| usage(e.to_string()))?;
        field_columns(&field, spec)?
    };
    std::fs::write(out, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use mfgmaster::Grid;
    use std::sync::Arc;

    fn field(d: usize) -> GridField {
        GridField::from_fn(Arc::new(Grid::new(d, 1.0, 0.5).unwrap()), |x, o| o.copy_from_slice(x)).unwrap()
    }

    #[test]
    fn one_dimensional_field_is_two_columns() {
        let text = field_columns(&field(1), &SliceSpec::default()).unwrap();
        assert_eq!(text, "# x_1 U_1\n0 0\n0.5 0.5\n1 1\n");
    }

    #[test]
    fn slice_of_a_plane() {
        let spec = SliceSpec {
            fix: vec![(2, 0.0)],
            component: Some(1),
            ..SliceSpec::default()
        };
        let text = field_columns(&field(2), &spec).unwrap();
        assert_eq!(text, "# x_1 U_1\n0 0\n0.5 0.5\n1 1\n");
    }

    #[test]
    fn plane_without_slice_is_blocked() {
        let text = field_columns(&field(2), &SliceSpec::default()).unwrap();
        assert_eq!(text.matches("\n\n").count(), 2);
    }

    #[test]
    fn three_dimensions_need_a_directive() {
        assert!(matches!(field_columns(&field(3), &SliceSpec::default()), Err(CliError::Usage(_))));
        let spec = SliceSpec {
            fix: vec![(3, 0.5)],
            ..SliceSpec::default()
        };
        assert!(field_columns(&field(3), &spec).is_ok());
    }
}
