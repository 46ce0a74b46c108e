use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A method's rank on each dataset, `None` where it did not report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodRanks {
    pub method: String,
    pub ranks: Vec<Option<u32>>,
}

/// Sum of ranks divided by the number of datasets ranked, per method.
pub fn average_ranking(table: &[MethodRanks]) -> Result<Vec<(String, f64)>> {
    table
        .iter()
        .map(|m| {
            let ranked: Vec<u32> = m.ranks.iter().flatten().copied().collect();
            if ranked.is_empty() {
                return Err(Error::contract(format!("method `{}` has no ranked datasets", m.method)));
            }
            let sum: u32 = ranked.iter().sum();
            Ok((m.method.clone(), sum as f64 / ranked.len() as f64))
        })
        .collect()
}

/// CSV with one row per method: the per-dataset ranks (empty when missing)
/// and the average rank to two decimals.
pub fn ranking_csv(datasets: &[&str], table: &[MethodRanks]) -> Result<String> {
    if let Some(m) = table.iter().find(|m| m.ranks.len() != datasets.len()) {
        return Err(Error::contract(format!(
            "method `{}` has {} ranks for {} datasets",
            m.method,
            m.ranks.len(),
            datasets.len()
        )));
    }
    let averages = average_ranking(table)?;
    let mut out = format!("method,{},avg_rank\n", datasets.join(","));
    for (m, (_, avg)) in table.iter().zip(averages) {
        let ranks: Vec<String> = m.ranks.iter().map(|r| r.map(|v| v.to_string()).unwrap_or_default()).collect();
        out.push_str(&format!("{},{},{avg:.2}\n", m.method, ranks.join(",")));
    }
    Ok(out)
}
