use super::{run_session, App, HarnessError, Scenario};

pub const BENCH_CSV_HEADER: &str =
    "app,k,setup_ms,preprocess_ms,query_ms,attest_ms,attest_per_query_ms,signatures,tpm_virtual_ms,bytes_on_wire";

/// One honest batch of `k` queries. `attest_ms` is the TPM time charged for
/// the batch (virtual clock); the other phase times are wall clock.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub app: App,
    pub k: usize,
    pub setup_ms: f64,
    pub preprocess_ms: f64,
    /// Wall time per query.
    pub query_ms: f64,
    pub attest_ms: f64,
    pub attest_per_query_ms: f64,
    pub signatures: u64,
    /// Virtual TPM time over all phases.
    pub tpm_virtual_ms: f64,
    pub bytes_on_wire: u64,
}

impl BenchReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.3},{:.3},{:.3},{:.3},{:.3},{},{:.3},{}",
            self.app,
            self.k,
            self.setup_ms,
            self.preprocess_ms,
            self.query_ms,
            self.attest_ms,
            self.attest_per_query_ms,
            self.signatures,
            self.tpm_virtual_ms,
            self.bytes_on_wire
        )
    }
}

pub fn bench_csv(reports: &[BenchReport]) -> String {
    let mut out = String::from(BENCH_CSV_HEADER);
    out.push('\n');
    for r in reports {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// One honest session per batch size, each on a freshly booted server.
pub fn run_bench(base: &Scenario, batches: &[usize]) -> Result<Vec<BenchReport>, HarnessError> {
    let mut out = Vec::with_capacity(batches.len());
    for &k in batches {
        if k == 0 {
            return Err(HarnessError::Setup("batch size must be positive".into()));
        }
        let mut s = base.clone().with_batch(k);
        if s.app == App::Psi {
            s.psi_client_items = s.psi_client_items.max(k);
        }
        let r = run_session(&s, None)?;
        if !r.accepted {
            return Err(HarnessError::Protocol(format!("honest bench session rejected: {}", r.verdict)));
        }
        let attest_ms = r.server.finish_virtual_us as f64 / 1e3;
        out.push(BenchReport {
            app: s.app,
            k,
            setup_ms: r.setup_ms,
            preprocess_ms: r.timings.preprocess_ms,
            query_ms: r.timings.query_ms / k as f64,
            attest_ms,
            attest_per_query_ms: attest_ms / k as f64,
            signatures: r.server.signatures,
            tpm_virtual_ms: r.server.total_virtual_us() as f64 / 1e3,
            bytes_on_wire: r.bytes_on_wire,
        });
    }
    Ok(out)
}
