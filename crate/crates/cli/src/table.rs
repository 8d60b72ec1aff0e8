// SPDX-License-Identifier: Apache-2.0

//! The security-level table: minimal batch size and threshold per level.

use std::fmt::Write as _;

use power_attest::security::{security_table, LevelRule, SecurityError, SecurityParams, TABLE_LEVELS};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub level_bits: u32,
    pub n: u64,
    pub x_th: u64,
    pub p_cheat: f64,
    /// `1 - P(beta)`.
    pub honest_failure: f64,
}

impl From<(u32, SecurityParams)> for TableRow {
    fn from((level_bits, p): (u32, SecurityParams)) -> Self {
        Self {
            level_bits,
            n: p.n,
            x_th: p.x_th,
            p_cheat: p.p_cheat,
            honest_failure: p.honest_failure,
        }
    }
}

/// Rows for 32, 64, 128 and 256 bits.
pub fn security_levels(p_alpha: f64, p_beta: f64, rule: LevelRule) -> Result<Vec<TableRow>, SecurityError> {
    Ok(security_table(p_alpha, p_beta, &TABLE_LEVELS, rule)?
        .into_iter()
        .map(TableRow::from)
        .collect())
}

/// Plain-text rendering with three significant figures.
///
/// ```
/// use power_attest::security::LevelRule;
/// use power_attest_cli::table::{format_table, security_levels};
///
/// let rows = security_levels(0.082, 0.69, LevelRule::NearestBit).unwrap();
/// let text = format_table(&rows);
/// assert!(text.lines().nth(1).unwrap().starts_with("32-bit"));
/// ```
pub fn format_table(rows: &[TableRow]) -> String {
    let mut out = format!("{:<8} {:>5} {:>5} {:>10} {:>10}\n", "level", "n", "x_th", "P(alpha)", "1-P(beta)");
    for r in rows {
        let _ = writeln!(
            out,
            "{:<8} {:>5} {:>5} {:>10.2e} {:>10.2e}",
            format!("{}-bit", r.level_bits),
            r.n,
            r.x_th,
            r.p_cheat,
            r.honest_failure
        );
    }
    out
}
