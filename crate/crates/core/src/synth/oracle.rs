//! Quadratic-time reference implementations of the ranking metrics, kept
//! deliberately independent of the crate's metric code.

use std::collections::BTreeMap;

/// `(query, reference, score)`.
pub type Triple<'a> = (&'a str, &'a str, f64);

/// Whether `a` ranks strictly before `b` globally.
fn ahead(a: &Triple<'_>, b: &Triple<'_>) -> bool {
    if a.2 != b.2 {
        return a.2 > b.2;
    }
    if a.0 != b.0 {
        return a.0 < b.0;
    }
    a.1 < b.1
}

/// Threshold sweep: every true pair contributes the precision of the cut
/// placed right after it, found by counting.
pub fn micro_ap(triples: &[Triple<'_>], truth: &BTreeMap<String, String>, total_positives: usize) -> f64 {
    let is_true = |t: &Triple<'_>| truth.get(t.0).is_some_and(|r| r == t.1);
    let mut sum = 0.0;
    for t in triples.iter().filter(|t| is_true(t)) {
        let mut above = 1usize;
        let mut true_above = 1usize;
        for u in triples {
            if ahead(u, t) {
                above += 1;
                if is_true(u) {
                    true_above += 1;
                }
            }
        }
        sum += true_above as f64 / above as f64;
    }
    if total_positives == 0 {
        0.0
    } else {
        sum / total_positives as f64
    }
}

/// Inverse rank of the true reference among the query's candidates.
pub fn inverse_rank(query: &str, triples: &[Triple<'_>], truth: &BTreeMap<String, String>) -> f64 {
    let Some(target) = truth.get(query) else {
        return 0.0;
    };
    let own: Vec<&Triple<'_>> = triples.iter().filter(|t| t.0 == query).collect();
    let Some(hit) = own.iter().find(|t| t.1 == target) else {
        return 0.0;
    };
    let rank = 1 + own
        .iter()
        .filter(|t| t.2 > hit.2 || (t.2 == hit.2 && t.1 < hit.1))
        .count();
    1.0 / rank as f64
}

/// Mean inverse rank over the ground-truth queries.
pub fn mean_ap(triples: &[Triple<'_>], truth: &BTreeMap<String, String>) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    let total: f64 = truth.keys().map(|q| inverse_rank(q, triples, truth)).sum();
    total / truth.len() as f64
}

/// Both oracles on one instance.
pub fn oracle_metrics(triples: &[Triple<'_>], truth: &BTreeMap<String, String>) -> (f64, f64) {
    (micro_ap(triples, truth, truth.len()), mean_ap(triples, truth))
}
