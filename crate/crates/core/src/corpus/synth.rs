//! Seeded generator of sandbox-like API-call traces with planted motifs.
//!
//! Every trace is a walk of a Markov chain whose states are short benign
//! motifs. Malware traces additionally carry a malicious motif whose first
//! call sits at or after `motif_onset_min`, so a short prefix cannot contain
//! it. A precursor motif, paired with the malicious motif, may appear early
//! in a trace: it is common in malware and rare in benign programs, which
//! leaves the prefix weakly informative while making the later payload
//! predictable for a sequence model. Inserted motifs always land between
//! background motifs, never inside one.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::trace::{ApiTrace, Label};
use super::vocab::NUM_RESERVED;
use crate::error::{Error, Result};

const API_NAMES: &[&str] = &[
    "NtOpenFile", "NtCreateFile", "NtReadFile", "NtWriteFile", "NtClose", "NtQueryInformationFile",
    "NtSetInformationFile", "NtQueryDirectoryFile", "NtDeviceIoControlFile", "NtOpenKey", "NtQueryValueKey",
    "NtSetValueKey", "NtEnumerateKey", "NtDeleteKey", "NtOpenProcess", "NtQuerySystemInformation",
    "NtQueryInformationProcess", "NtAllocateVirtualMemory", "NtFreeVirtualMemory", "NtProtectVirtualMemory",
    "NtMapViewOfSection", "NtUnmapViewOfSection", "NtCreateSection", "NtOpenSection", "NtDelayExecution",
    "NtCreateMutant", "NtOpenMutant", "NtCreateEvent", "NtWaitForSingleObject", "NtQueryAttributesFile",
    "LdrLoadDll", "LdrGetProcedureAddress", "LdrGetDllHandle", "LdrUnloadDll", "GetSystemTimeAsFileTime",
    "GetSystemInfo", "GetNativeSystemInfo", "GetComputerNameW", "GetUserNameW", "GetVolumeInformationW",
    "GetFileAttributesW", "GetFileSize", "GetFileType", "SetFilePointer", "SetFileAttributesW",
    "FindFirstFileExW", "FindNextFileW", "FindClose", "CreateDirectoryW", "RemoveDirectoryW",
    "DeleteFileW", "CopyFileW", "MoveFileWithProgressW", "GetTempPathW", "GetSystemDirectoryW",
    "GetSystemWindowsDirectoryW", "SHGetFolderPathW", "RegOpenKeyExW", "RegQueryValueExW", "RegCloseKey",
    "RegEnumKeyExW", "RegEnumValueW", "RegQueryInfoKeyW", "RegCreateKeyExW", "RegSetValueExW",
    "CoInitializeEx", "CoCreateInstance", "CoUninitialize", "OleInitialize", "GetCursorPos",
    "GetForegroundWindow", "FindWindowW", "GetKeyState", "GetAsyncKeyState", "LoadStringW",
    "LoadResource", "FindResourceExW", "SizeofResource", "GetTimeZoneInformation", "GetLocalTime",
    "SetErrorMode", "SetUnhandledExceptionFilter", "GetDiskFreeSpaceExW", "DrawTextExW", "CreateActCtxW",
    "GetAdaptersAddresses", "InternetOpenW", "InternetConnectW", "HttpOpenRequestW", "HttpSendRequestW",
    "InternetReadFile", "InternetCloseHandle", "WSAStartup", "socket", "connect", "send", "recv",
    "closesocket", "getaddrinfo", "DnsQuery_A", "CryptAcquireContextW", "CryptCreateHash", "CryptHashData",
    "CryptDecrypt", "CryptEncrypt", "CryptGenKey", "CryptExportKey", "CreateProcessInternalW",
    "WriteProcessMemory", "ReadProcessMemory", "VirtualAllocEx", "VirtualProtectEx", "CreateRemoteThread",
    "NtResumeThread", "NtSuspendThread", "SetWindowsHookExW", "OpenSCManagerW", "CreateServiceW",
    "StartServiceW", "ControlService", "DeleteService", "IsDebuggerPresent", "CheckRemoteDebuggerPresent",
    "OutputDebugStringA", "GetTickCount", "QueryPerformanceCounter", "ShellExecuteExW", "WinExec",
    "NtTerminateProcess", "ExitProcess",
];

/// Parameters of the synthetic corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    /// Vocabulary size the corpus should induce, reserved ids included.
    pub vocab_size: usize,
    pub n_traces: usize,
    pub malware_fraction: f64,
    pub benign_motifs: Vec<Vec<String>>,
    pub malicious_motifs: Vec<Vec<String>>,
    /// One precursor per malicious motif (same index), or none.
    pub precursor_motifs: Vec<Vec<String>>,
    pub precursor_rate_malware: f64,
    pub precursor_rate_benign: f64,
    /// Inclusive start-position range of the precursor.
    pub precursor_window: (usize, usize),
    pub motif_onset_min: usize,
    pub motif_onset_max: usize,
    /// Successors per benign motif in the background chain.
    pub chain_fanout: usize,
    pub trace_len_min: usize,
    pub trace_len_max: usize,
    pub n_sources: usize,
    pub seed: u64,
}

impl SynthConfig {
    /// The corpus used by the desk-scale experiments: 2,000 traces over a
    /// 120-id vocabulary, half malware, payload onset at call 20 or later.
    pub fn standard(seed: u64) -> Self {
        Self::with_vocab(120, 2000, seed)
    }

    /// Builds motifs from a fixed pool of API names. Three malicious motifs of
    /// four calls are carved out first; the rest of the names form benign
    /// motifs of two to four calls. Each precursor is a benign motif played
    /// backwards, an ordering the background chain never produces.
    pub fn with_vocab(vocab_size: usize, n_traces: usize, seed: u64) -> Self {
        let n_names = vocab_size.saturating_sub(NUM_RESERVED);
        let names = name_pool(n_names);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_a11);
        let mut pool: Vec<String> = names.clone();
        pool.shuffle(&mut rng);
        fn take(pool: &mut Vec<String>, k: usize) -> Vec<String> {
            pool.drain(..k.min(pool.len())).collect()
        }
        let malicious_motifs: Vec<Vec<String>> = (0..3).map(|_| take(&mut pool, 4)).collect();
        let mut benign_motifs = Vec::new();
        while !pool.is_empty() {
            let k = rng.gen_range(2..=4);
            benign_motifs.push(take(&mut pool, k));
        }
        let mut precursor_motifs: Vec<Vec<String>> = benign_motifs
            .iter()
            .filter(|m| m.len() >= 3)
            .take(3)
            .map(|m| m.iter().rev().cloned().collect())
            .collect();
        if precursor_motifs.len() < 3 {
            precursor_motifs.clear();
        }
        SynthConfig {
            vocab_size,
            n_traces,
            malware_fraction: 0.5,
            benign_motifs,
            malicious_motifs,
            precursor_motifs,
            precursor_rate_malware: 0.9,
            precursor_rate_benign: 0.1,
            precursor_window: (2, 12),
            motif_onset_min: 20,
            motif_onset_max: 22,
            chain_fanout: 3,
            trace_len_min: 32,
            trace_len_max: 60,
            n_sources: 1,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if !(self.malware_fraction > 0.0 && self.malware_fraction < 1.0) {
            return bad("malware_fraction must be in (0, 1)");
        }
        if self.benign_motifs.is_empty() || self.benign_motifs.iter().any(Vec::is_empty) {
            return bad("benign motifs must be non-empty");
        }
        if self.malicious_motifs.is_empty() || self.malicious_motifs.iter().any(Vec::is_empty) {
            return bad("malicious motifs must be non-empty");
        }
        if !self.precursor_motifs.is_empty() && self.precursor_motifs.len() != self.malicious_motifs.len() {
            return bad("precursor motifs must pair one-to-one with malicious motifs");
        }
        if self.trace_len_min == 0 || self.trace_len_min > self.trace_len_max {
            return bad("trace length range is empty");
        }
        if self.motif_onset_min > self.motif_onset_max {
            return bad("motif onset range is empty");
        }
        let longest = self.malicious_motifs.iter().map(Vec::len).max().unwrap_or(0);
        if self.motif_onset_max + longest > self.trace_len_min {
            return Err(Error::InvalidArgument(format!(
                "malicious motif of {longest} calls starting at {} does not fit traces of {} calls",
                self.motif_onset_max, self.trace_len_min
            )));
        }
        let longest_pre = self.precursor_motifs.iter().map(Vec::len).max().unwrap_or(0);
        if self.precursor_window.1 + longest_pre > self.motif_onset_min {
            return bad("precursor window must end before the payload onset");
        }
        if self.chain_fanout == 0 || self.n_sources == 0 {
            return bad("chain_fanout and n_sources must be positive");
        }
        Ok(())
    }
}

fn name_pool(n: usize) -> Vec<String> {
    (0..n)
        .map(|i| match API_NAMES.get(i) {
            Some(name) => name.to_string(),
            None => format!("ApiCall{i:03}"),
        })
        .collect()
}

/// Benign background chain over motif indices.
struct MotifChain {
    successors: Vec<Vec<(usize, f64)>>,
}

impl MotifChain {
    fn new(n: usize, fanout: usize, rng: &mut ChaCha8Rng) -> Self {
        let successors = (0..n)
            .map(|_| {
                let mut next: Vec<usize> = (0..n).collect();
                next.shuffle(rng);
                next.truncate(fanout.min(n));
                let weights: Vec<f64> = next.iter().map(|_| rng.gen_range(0.2..1.0)).collect();
                let z: f64 = weights.iter().sum();
                next.into_iter().zip(weights.into_iter().map(|w| w / z)).collect()
            })
            .collect();
        MotifChain { successors }
    }

    fn step(&self, state: usize, rng: &mut ChaCha8Rng) -> usize {
        let mut u: f64 = rng.gen();
        for &(s, p) in &self.successors[state] {
            if u < p {
                return s;
            }
            u -= p;
        }
        self.successors[state].last().map(|&(s, _)| s).unwrap_or(state)
    }
}

/// Background walk as a list of motif blocks totalling exactly `len` calls.
fn background(cfg: &SynthConfig, chain: &MotifChain, len: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<String>> {
    let mut blocks = Vec::new();
    let mut total = 0;
    let mut state = rng.gen_range(0..cfg.benign_motifs.len());
    while total < len {
        let mut block = cfg.benign_motifs[state].clone();
        block.truncate(len - total);
        total += block.len();
        blocks.push(block);
        state = chain.step(state, rng);
    }
    blocks
}

/// Index of the first block starting at or after call `at`; `blocks.len()` if none.
fn block_at(blocks: &[Vec<String>], at: usize) -> usize {
    let mut start = 0;
    for (i, b) in blocks.iter().enumerate() {
        if start >= at {
            return i;
        }
        start += b.len();
    }
    blocks.len()
}

/// Generates `cfg.n_traces` traces; exactly `round(n * malware_fraction)` are malware.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Vec<ApiTrace>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let chain = MotifChain::new(cfg.benign_motifs.len(), cfg.chain_fanout, &mut rng);
    let n_malware = (cfg.n_traces as f64 * cfg.malware_fraction).round() as usize;
    let mut labels: Vec<Label> = (0..cfg.n_traces)
        .map(|i| if i < n_malware { Label::Malware } else { Label::Benign })
        .collect();
    labels.shuffle(&mut rng);

    let mut traces = Vec::with_capacity(cfg.n_traces);
    for (i, label) in labels.into_iter().enumerate() {
        let len = rng.gen_range(cfg.trace_len_min..=cfg.trace_len_max);
        let family = rng.gen_range(0..cfg.malicious_motifs.len());
        let precursor_rate = match label {
            Label::Malware => cfg.precursor_rate_malware,
            Label::Benign => cfg.precursor_rate_benign,
        };
        let precursor = cfg
            .precursor_motifs
            .get(family)
            .filter(|_| rng.gen_bool(precursor_rate.clamp(0.0, 1.0)));
        let payload = (label == Label::Malware).then(|| &cfg.malicious_motifs[family]);

        let inserted = precursor.map_or(0, Vec::len) + payload.map_or(0, Vec::len);
        let mut blocks = background(cfg, &chain, len - inserted, &mut rng);
        if let Some(p) = precursor {
            let at = rng.gen_range(cfg.precursor_window.0..=cfg.precursor_window.1);
            let i = block_at(&blocks, at);
            blocks.insert(i, p.clone());
        }
        if let Some(m) = payload {
            let at = rng.gen_range(cfg.motif_onset_min..=cfg.motif_onset_max);
            let i = block_at(&blocks, at);
            blocks.insert(i, m.clone());
        }
        let calls: Vec<String> = blocks.concat();
        let source = if cfg.n_sources == 1 {
            "synthetic".to_string()
        } else {
            format!("sandbox-{}", rng.gen_range(0..cfg.n_sources))
        };
        traces.push(ApiTrace::new(format!("syn-{i:05}"), label, calls, source)?);
    }
    Ok(traces)
}

/// Index of the first occurrence of `motif` in `calls` as a contiguous run.
pub fn find_motif(calls: &[String], motif: &[String]) -> Option<usize> {
    if motif.is_empty() || motif.len() > calls.len() {
        return None;
    }
    calls.windows(motif.len()).position(|w| w == motif)
}
