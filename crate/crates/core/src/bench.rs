//! Recall / latency evaluation and simple parameter tuning.

use std::fmt::Write as _;
use std::time::Instant;

use crate::dataset::{recall_at_k, GroundTruth, VectorSet};
use crate::engine::{Index, SearchRequest, SearchResult};
use crate::error::{Error, Result};

/// Aggregate quality numbers for one request over a query set.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub recall: f64,
    pub mean_nprob: f64,
    pub mean_reorder: f64,
    pub mean_points_scanned: f64,
    pub mean_clusters_pruned: f64,
    pub mean_escalations: f64,
}

impl Evaluation {
    pub fn from_results(results: &[SearchResult], truth: &GroundTruth, k: usize) -> Self {
        let ids: Vec<Vec<u32>> = results.iter().map(|r| r.ids()).collect();
        let n = results.len().max(1) as f64;
        let mean = |f: &dyn Fn(&SearchResult) -> usize| results.iter().map(f).sum::<usize>() as f64 / n;
        Self {
            recall: recall_at_k(&ids, truth, k),
            mean_nprob: mean(&|r| r.diagnostics.nprob_used),
            mean_reorder: mean(&|r| r.diagnostics.reorder_used),
            mean_points_scanned: mean(&|r| r.diagnostics.points_scanned),
            mean_clusters_pruned: mean(&|r| r.diagnostics.clusters_pruned),
            mean_escalations: mean(&|r| r.diagnostics.escalations),
        }
    }
}

fn check_truth(queries: &VectorSet, truth: &GroundTruth, k: usize) -> Result<()> {
    if truth.len() < queries.len() {
        return Err(Error::MissingGroundTruth {
            requested: queries.len(),
            available: truth.len(),
        });
    }
    if truth.k < k {
        return Err(Error::InvalidParameter(format!(
            "ground truth has {} neighbors per query, recall@{k} needs {k}",
            truth.k
        )));
    }
    Ok(())
}

/// Runs `req` over all queries (in parallel) and scores the results.
pub fn evaluate(index: &Index, queries: &VectorSet, truth: &GroundTruth, req: &SearchRequest) -> Result<Evaluation> {
    check_truth(queries, truth, req.k)?;
    let results = index.search_batch(queries, req)?;
    Ok(Evaluation::from_results(&results, truth, req.k))
}

/// Smallest `nprob` whose recall reaches `target` (binary search, assuming
/// recall grows with `nprob`), with its evaluation. `None` if even probing
/// every cluster falls short.
pub fn min_nprob_for_recall(
    index: &Index,
    queries: &VectorSet,
    truth: &GroundTruth,
    base: &SearchRequest,
    target: f64,
) -> Result<Option<(usize, Evaluation)>> {
    let eval_at = |nprob: usize| {
        let req = SearchRequest { nprob, ..base.clone() };
        evaluate(index, queries, truth, &req)
    };
    let l = index.num_clusters();
    let top = eval_at(l)?;
    if top.recall < target {
        return Ok(None);
    }
    let (mut lo, mut hi, mut best) = (1usize, l, top);
    while lo < hi {
        let mid = (lo + hi) / 2;
        let e = eval_at(mid)?;
        if e.recall >= target {
            hi = mid;
            best = e;
        } else {
            lo = mid + 1;
        }
    }
    Ok(Some((hi, best)))
}

/// Throughput and latency of single-query search.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub config: String,
    pub seed: u64,
    pub queries: usize,
    pub k: usize,
    pub workers: usize,
    pub recall: f64,
    pub mean_latency_us: f64,
    pub median_latency_us: f64,
    pub p99_latency_us: f64,
    pub qps: f64,
    pub mean_nprob: f64,
    pub mean_reorder: f64,
    pub mean_points_scanned: f64,
}

impl BenchReport {
    pub const CSV_HEADER: &'static str = "config,seed,queries,k,workers,recall,mean_latency_us,median_latency_us,p99_latency_us,qps,mean_nprob,mean_reorder,mean_points_scanned";

    pub fn csv_row(&self) -> String {
        format!(
            "\"{}\",{},{},{},{},{:.6},{:.2},{:.2},{:.2},{:.1},{:.3},{:.3},{:.1}",
            self.config.replace('"', "'"),
            self.seed,
            self.queries,
            self.k,
            self.workers,
            self.recall,
            self.mean_latency_us,
            self.median_latency_us,
            self.p99_latency_us,
            self.qps,
            self.mean_nprob,
            self.mean_reorder,
            self.mean_points_scanned
        )
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        let rows: [(&str, String); 12] = [
            ("config", self.config.clone()),
            ("seed", self.seed.to_string()),
            ("queries", self.queries.to_string()),
            ("workers", self.workers.to_string()),
            ("recall@k", format!("{:.4} (k={})", self.recall, self.k)),
            ("mean latency", format!("{:.1} us", self.mean_latency_us)),
            ("median latency", format!("{:.1} us", self.median_latency_us)),
            ("p99 latency", format!("{:.1} us", self.p99_latency_us)),
            ("QPS", format!("{:.1}", self.qps)),
            ("mean nprob", format!("{:.2}", self.mean_nprob)),
            ("mean reorder", format!("{:.1}", self.mean_reorder)),
            ("mean points scanned", format!("{:.1}", self.mean_points_scanned)),
        ];
        for (k, v) in rows {
            let _ = writeln!(s, "{k:<20} {v}");
        }
        s
    }
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let idx = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len()) - 1;
    sorted[idx]
}

/// Searches every query once (batch size one). Worker `w` of `workers` owns
/// queries `w, w + workers, ...`; results come back in query order.
pub fn run_bench(
    index: &Index,
    queries: &VectorSet,
    truth: &GroundTruth,
    req: &SearchRequest,
    workers: usize,
    seed: u64,
    config: &str,
) -> Result<(BenchReport, Vec<SearchResult>)> {
    check_truth(queries, truth, req.k)?;
    let workers = workers.max(1);
    let start = Instant::now();
    let per_worker: Vec<Result<Vec<(usize, f64, SearchResult)>>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                s.spawn(move || {
                    let mut out = Vec::new();
                    for qi in (w..queries.len()).step_by(workers) {
                        let t = Instant::now();
                        let r = index.search(queries.row(qi), req)?;
                        out.push((qi, t.elapsed().as_secs_f64() * 1e6, r));
                    }
                    Ok(out)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("bench worker panicked"))
            .collect()
    });
    let wall = start.elapsed().as_secs_f64();
    let mut all = Vec::with_capacity(queries.len());
    for w in per_worker {
        all.extend(w?);
    }
    all.sort_by_key(|(qi, _, _)| *qi);
    let mut lat: Vec<f64> = all.iter().map(|(_, l, _)| *l).collect();
    let results: Vec<SearchResult> = all.into_iter().map(|(_, _, r)| r).collect();
    let eval = Evaluation::from_results(&results, truth, req.k);
    lat.sort_by(f64::total_cmp);
    let n = results.len();
    Ok((
        BenchReport {
            config: config.to_string(),
            seed,
            queries: n,
            k: req.k,
            workers,
            recall: eval.recall,
            mean_latency_us: lat.iter().sum::<f64>() / n.max(1) as f64,
            median_latency_us: percentile(&lat, 0.5),
            p99_latency_us: percentile(&lat, 0.99),
            qps: if wall > 0.0 { n as f64 / wall } else { 0.0 },
            mean_nprob: eval.mean_nprob,
            mean_reorder: eval.mean_reorder,
            mean_points_scanned: eval.mean_points_scanned,
        },
        results,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percentile_examples() {
        let v: Vec<f64> = (1..=100).map(|x| x as f64).collect();
        assert_eq!(percentile(&v, 0.5), 50.0);
        assert_eq!(percentile(&v, 0.99), 99.0);
        assert_eq!(percentile(&[], 0.5), 0.0);
    }
}
