//! Per-run CSV traces.

use crate::dsblo::RunLog;

pub const CSV_HEADER: &str = "t,wall_time_s,F,eta,m_norm,stationarity_norm,q_norm";
const WALL_TIME_COLUMN: usize = 1;

fn cell(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// One row per iterate. `stationarity[t - 1]` fills the stationarity column;
/// empty cells mark values that were not computed at that iterate.
pub fn render_csv(log: &RunLog, stationarity: &[Option<f64>]) -> String {
    let mut out = String::with_capacity(64 * (log.records.len() + 1));
    out.push_str(CSV_HEADER);
    out.push('\n');
    for (i, r) in log.records.iter().enumerate() {
        let row = [
            r.t.to_string(),
            r.wall_time.to_string(),
            cell(r.f_exact),
            r.eta.to_string(),
            r.m_norm.to_string(),
            cell(stationarity.get(i).copied().flatten()),
            r.q_norm.to_string(),
        ];
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Blanks the wall-time column so traces from repeated runs compare equal.
pub fn mask_wall_time(csv: &str) -> String {
    csv.lines()
        .enumerate()
        .map(|(i, line)| {
            if i == 0 {
                return line.to_string();
            }
            let mut cells: Vec<&str> = line.split(',').collect();
            if cells.len() > WALL_TIME_COLUMN {
                cells[WALL_TIME_COLUMN] = "";
            }
            cells.join(",")
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// `(wall_time_s, F)` pairs from a CSV trace, skipping rows without `F`.
pub fn objective_points(csv: &str) -> Vec<(f64, f64)> {
    csv.lines()
        .skip(1)
        .filter_map(|line| {
            let cells: Vec<&str> = line.split(',').collect();
            Some((cells.get(1)?.parse().ok()?, cells.get(2)?.parse().ok()?))
        })
        .collect()
}
