//! Versioned algorithm records, deployment assignments and the hash-chained
//! audit log.

use crate::canonical::{canonical_digest, from_canonical, to_canonical, Digest};
use crate::clock::Clock;
use crate::monitor::{Alert, DeploymentDirectory, DirectoryUnavailable};
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

pub const MODELS_LOG: &str = "models.log";
pub const ASSIGNMENTS_LOG: &str = "assignments.log";
pub const AUDIT_LOG: &str = "audit.log";
pub const AUDIT_HEAD: &str = "audit.head";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ModelStatus {
    Candidate,
    Approved,
    Deployed,
    Suspended,
}

impl ModelStatus {
    pub fn can_become(self, next: ModelStatus) -> bool {
        use ModelStatus::*;
        matches!((self, next), (Candidate, Approved) | (Approved, Deployed) | (Deployed, Suspended) | (Suspended, Deployed))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelRecord {
    pub algorithm_id: String,
    pub version: String,
    pub weights_digest: Digest,
    pub status: ModelStatus,
    pub registered_at: DateTime<Utc>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DeployMode {
    Local,
    Central,
    Both,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeploymentAssignment {
    pub site_id: String,
    pub algorithm_id: String,
    pub version: String,
    pub mode: DeployMode,
    pub active: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AuditAction {
    Register,
    StatusChange,
    Assign,
    Alert,
    IngestSummary,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditEntry {
    pub seq: u64,
    pub timestamp: DateTime<Utc>,
    pub actor: String,
    pub action: AuditAction,
    pub payload_digest: Digest,
    pub prev_hash: Digest,
    pub entry_hash: Digest,
}

#[derive(Serialize)]
struct Preimage<'a> {
    seq: u64,
    timestamp: &'a DateTime<Utc>,
    actor: &'a str,
    action: AuditAction,
    payload_digest: &'a Digest,
    prev_hash: &'a Digest,
}

/// Digest of the entry's six hashed fields in canonical form.
pub fn entry_hash(
    seq: u64,
    timestamp: &DateTime<Utc>,
    actor: &str,
    action: AuditAction,
    payload_digest: &Digest,
    prev_hash: &Digest,
) -> Digest {
    canonical_digest(&Preimage { seq, timestamp, actor, action, payload_digest, prev_hash })
}

impl AuditEntry {
    pub fn recompute_hash(&self) -> Digest {
        entry_hash(self.seq, &self.timestamp, &self.actor, self.action, &self.payload_digest, &self.prev_hash)
    }
}

/// Last seq and hash of the chain, persisted apart from the log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditHead {
    pub seq: u64,
    pub entry_hash: Digest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("broken at seq {seq}")]
pub struct ChainBroken {
    pub seq: u64,
}

/// Checks numbering, linkage and every hash, then the head if given.
/// Reports the earliest violation.
pub fn verify_audit_chain(entries: &[AuditEntry], head: Option<&AuditHead>) -> Result<(), ChainBroken> {
    let mut prev = Digest::zero();
    for (i, e) in entries.iter().enumerate() {
        let seq = i as u64 + 1;
        if e.seq != seq || e.prev_hash != prev || e.recompute_hash() != e.entry_hash {
            return Err(ChainBroken { seq });
        }
        prev = e.entry_hash.clone();
    }
    let Some(head) = head else { return Ok(()) };
    let len = entries.len() as u64;
    if head.seq > len {
        return Err(ChainBroken { seq: len + 1 });
    }
    if head.seq < len {
        return Err(ChainBroken { seq: head.seq + 1 });
    }
    if head.entry_hash != prev {
        return Err(ChainBroken { seq: len.max(1) });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AuditVerdict {
    Ok { entries: u64 },
    Broken { seq: u64 },
}

/// Verifies a persisted log against the `audit.head` beside it, when one
/// exists. A line that is not the canonical form of an entry breaks the
/// chain at that line's position.
pub fn verify_audit_file(log: &Path) -> io::Result<AuditVerdict> {
    let text = fs::read_to_string(log)?;
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        match from_canonical::<AuditEntry>(line) {
            Ok(e) if to_canonical(&e).ok().as_deref() == Some(line) => entries.push(e),
            _ => return Ok(AuditVerdict::Broken { seq: i as u64 + 1 }),
        }
    }
    let head_path = log.with_file_name(AUDIT_HEAD);
    let head = match fs::read_to_string(&head_path) {
        Ok(h) => match from_canonical::<AuditHead>(h.trim_end()) {
            Ok(h) => Some(h),
            Err(_) => return Ok(AuditVerdict::Broken { seq: entries.len() as u64 + 1 }),
        },
        Err(e) if e.kind() == io::ErrorKind::NotFound => None,
        Err(e) => return Err(e),
    };
    Ok(match verify_audit_chain(&entries, head.as_ref()) {
        Ok(()) => AuditVerdict::Ok { entries: entries.len() as u64 },
        Err(b) => AuditVerdict::Broken { seq: b.seq },
    })
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum RegistryError {
    #[error("version {algorithm_id} {version} already registered")]
    Conflict { algorithm_id: String, version: String },
    #[error("unknown version {algorithm_id} {version}")]
    Unknown { algorithm_id: String, version: String },
    #[error("status change {from:?} -> {to:?} not allowed")]
    Transition { from: ModelStatus, to: ModelStatus },
    #[error("version {algorithm_id} {version} is {status:?}, not DEPLOYED")]
    NotDeployed { algorithm_id: String, version: String, status: ModelStatus },
    #[error("registry storage: {0}")]
    Io(String),
    #[error("registry files are inconsistent: {0}")]
    Corrupt(String),
}

impl From<io::Error> for RegistryError {
    fn from(e: io::Error) -> Self {
        RegistryError::Io(e.to_string())
    }
}

type VersionKey = (String, String);

/// Single-writer registry. Mutations append to the backing files, when
/// present, before they become visible.
pub struct Registry {
    clock: Arc<dyn Clock>,
    dir: Option<PathBuf>,
    models: BTreeMap<VersionKey, ModelRecord>,
    assignments: BTreeMap<(String, String, String), DeploymentAssignment>,
    audit: Vec<AuditEntry>,
}

fn append_line<T: Serialize>(path: &Path, record: &T) -> io::Result<()> {
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path)?;
    f.write_all(format!("{}\n", to_canonical(record).expect("registry records serialize")).as_bytes())?;
    f.flush()
}

fn read_lines<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, RegistryError> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(vec![]),
        Err(e) => return Err(e.into()),
    };
    text.lines()
        .map(|l| from_canonical(l).map_err(|e| RegistryError::Corrupt(format!("{}: {e}", path.display()))))
        .collect()
}

impl Registry {
    pub fn in_memory(clock: Arc<dyn Clock>) -> Self {
        Registry { clock, dir: None, models: BTreeMap::new(), assignments: BTreeMap::new(), audit: Vec::new() }
    }

    /// Opens or creates a registry directory, replaying its logs and
    /// verifying the audit chain.
    pub fn open(dir: impl Into<PathBuf>, clock: Arc<dyn Clock>) -> Result<Self, RegistryError> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        let mut reg = Self::in_memory(clock);
        for m in read_lines::<ModelRecord>(&dir.join(MODELS_LOG))? {
            reg.models.insert((m.algorithm_id.clone(), m.version.clone()), m);
        }
        for a in read_lines::<DeploymentAssignment>(&dir.join(ASSIGNMENTS_LOG))? {
            reg.assignments.insert((a.site_id.clone(), a.algorithm_id.clone(), a.version.clone()), a);
        }
        match verify_audit_file(&dir.join(AUDIT_LOG)) {
            Ok(AuditVerdict::Broken { seq }) => return Err(RegistryError::Corrupt(format!("audit broken at seq {seq}"))),
            Ok(AuditVerdict::Ok { .. }) => reg.audit = read_lines(&dir.join(AUDIT_LOG))?,
            Err(e) if e.kind() == io::ErrorKind::NotFound => {}
            Err(e) => return Err(e.into()),
        }
        reg.dir = Some(dir);
        Ok(reg)
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    fn persist<T: Serialize>(&self, file: &str, record: &T) -> Result<(), RegistryError> {
        if let Some(dir) = &self.dir {
            append_line(&dir.join(file), record)?;
        }
        Ok(())
    }

    pub fn model(&self, algorithm_id: &str, version: &str) -> Option<&ModelRecord> {
        self.models.get(&(algorithm_id.to_owned(), version.to_owned()))
    }

    pub fn models(&self) -> impl Iterator<Item = &ModelRecord> {
        self.models.values()
    }

    pub fn assignments(&self) -> impl Iterator<Item = &DeploymentAssignment> {
        self.assignments.values()
    }

    pub fn active_assignment(&self, site_id: &str, algorithm_id: &str) -> Option<&DeploymentAssignment> {
        self.assignments.values().find(|a| a.active && a.site_id == site_id && a.algorithm_id == algorithm_id)
    }

    pub fn audit(&self) -> &[AuditEntry] {
        &self.audit
    }

    pub fn head(&self) -> AuditHead {
        match self.audit.last() {
            Some(e) => AuditHead { seq: e.seq, entry_hash: e.entry_hash.clone() },
            None => AuditHead { seq: 0, entry_hash: Digest::zero() },
        }
    }

    /// Chains a new entry to the current head. The only mutation of the log.
    pub fn append_audit(
        &mut self,
        action: AuditAction,
        actor: &str,
        payload_digest: Digest,
    ) -> Result<AuditEntry, RegistryError> {
        let head = self.head();
        let seq = head.seq + 1;
        let timestamp = self.clock.now();
        let entry_hash = entry_hash(seq, &timestamp, actor, action, &payload_digest, &head.entry_hash);
        let entry = AuditEntry {
            seq,
            timestamp,
            actor: actor.to_owned(),
            action,
            payload_digest,
            prev_hash: head.entry_hash,
            entry_hash,
        };
        if let Some(dir) = &self.dir {
            append_line(&dir.join(AUDIT_LOG), &entry)?;
            let tmp = dir.join(format!("{AUDIT_HEAD}.tmp"));
            fs::write(&tmp, format!("{}\n", to_canonical(&AuditHead { seq, entry_hash: entry.entry_hash.clone() }).unwrap()))?;
            fs::rename(&tmp, dir.join(AUDIT_HEAD))?;
        }
        self.audit.push(entry.clone());
        Ok(entry)
    }

    /// Stores `rec` as CANDIDATE whatever status it carries.
    pub fn register_version(&mut self, rec: ModelRecord, actor: &str) -> Result<AuditEntry, RegistryError> {
        let key = (rec.algorithm_id.clone(), rec.version.clone());
        if self.models.contains_key(&key) {
            return Err(RegistryError::Conflict { algorithm_id: key.0, version: key.1 });
        }
        let rec = ModelRecord { status: ModelStatus::Candidate, ..rec };
        self.persist(MODELS_LOG, &rec)?;
        let digest = canonical_digest(&rec);
        self.models.insert(key, rec);
        self.append_audit(AuditAction::Register, actor, digest)
    }

    pub fn set_status(
        &mut self,
        algorithm_id: &str,
        version: &str,
        status: ModelStatus,
        actor: &str,
    ) -> Result<AuditEntry, RegistryError> {
        let key = (algorithm_id.to_owned(), version.to_owned());
        let Some(current) = self.models.get(&key) else {
            return Err(RegistryError::Unknown { algorithm_id: key.0, version: key.1 });
        };
        if !current.status.can_become(status) {
            return Err(RegistryError::Transition { from: current.status, to: status });
        }
        let rec = ModelRecord { status, ..current.clone() };
        self.persist(MODELS_LOG, &rec)?;
        let digest = canonical_digest(&rec);
        self.models.insert(key, rec);
        self.append_audit(AuditAction::StatusChange, actor, digest)
    }

    /// Activates `a`, deactivating any other active assignment of the same
    /// (site, algorithm).
    pub fn assign_deployment(&mut self, a: DeploymentAssignment, actor: &str) -> Result<AuditEntry, RegistryError> {
        let Some(model) = self.model(&a.algorithm_id, &a.version) else {
            return Err(RegistryError::Unknown { algorithm_id: a.algorithm_id, version: a.version });
        };
        if model.status != ModelStatus::Deployed {
            return Err(RegistryError::NotDeployed { algorithm_id: a.algorithm_id, version: a.version, status: model.status });
        }
        let stale: Vec<DeploymentAssignment> = self
            .assignments
            .values()
            .filter(|p| p.active && p.site_id == a.site_id && p.algorithm_id == a.algorithm_id)
            .map(|p| DeploymentAssignment { active: false, ..p.clone() })
            .collect();
        let a = DeploymentAssignment { active: true, ..a };
        for p in stale.iter().chain([&a]) {
            self.persist(ASSIGNMENTS_LOG, p)?;
            self.assignments.insert((p.site_id.clone(), p.algorithm_id.clone(), p.version.clone()), p.clone());
        }
        self.append_audit(AuditAction::Assign, actor, canonical_digest(&a))
    }

    pub fn record_alert(&mut self, alert: &Alert, actor: &str) -> Result<AuditEntry, RegistryError> {
        self.append_audit(AuditAction::Alert, actor, canonical_digest(alert))
    }

    /// Summarizes a batch of per-study events in one entry.
    pub fn ingest_summary<T: Serialize>(&mut self, summary: &T, actor: &str) -> Result<AuditEntry, RegistryError> {
        self.append_audit(AuditAction::IngestSummary, actor, canonical_digest(summary))
    }

    pub fn list_sites_running(&self, algorithm_id: &str, version: &str) -> BTreeSet<String> {
        let deployed = self.model(algorithm_id, version).is_some_and(|m| m.status == ModelStatus::Deployed);
        if !deployed {
            return BTreeSet::new();
        }
        self.assignments
            .values()
            .filter(|a| a.active && a.algorithm_id == algorithm_id && a.version == version)
            .map(|a| a.site_id.clone())
            .collect()
    }
}

impl DeploymentDirectory for Registry {
    fn list_sites_running(&self, algorithm_id: &str, version: &str) -> Result<BTreeSet<String>, DirectoryUnavailable> {
        Ok(Registry::list_sites_running(self, algorithm_id, version))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::VirtualClock;
    use chrono::TimeZone;
    use proptest::prelude::*;

    fn clock() -> Arc<VirtualClock> {
        Arc::new(VirtualClock::starting_at(Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap()))
    }

    fn rec(alg: &str, v: &str) -> ModelRecord {
        ModelRecord {
            algorithm_id: alg.into(),
            version: v.into(),
            weights_digest: Digest::of_bytes(format!("{alg}-{v}").as_bytes()),
            status: ModelStatus::Deployed,
            registered_at: Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap(),
        }
    }

    fn assign(site: &str, alg: &str, v: &str) -> DeploymentAssignment {
        DeploymentAssignment { site_id: site.into(), algorithm_id: alg.into(), version: v.into(), mode: DeployMode::Central, active: true }
    }

    fn deployed(reg: &mut Registry, alg: &str, v: &str) {
        reg.register_version(rec(alg, v), "ops").unwrap();
        reg.set_status(alg, v, ModelStatus::Approved, "qa").unwrap();
        reg.set_status(alg, v, ModelStatus::Deployed, "ops").unwrap();
    }

    #[test]
    fn register_forces_candidate_and_rejects_duplicates() {
        let mut reg = Registry::in_memory(clock());
        let e = reg.register_version(rec("cad-lung", "1.0"), "ops").unwrap();
        assert_eq!(e.seq, 1);
        assert_eq!(e.prev_hash, Digest::zero());
        assert_eq!(reg.model("cad-lung", "1.0").unwrap().status, ModelStatus::Candidate);
        assert!(matches!(reg.register_version(rec("cad-lung", "1.0"), "ops"), Err(RegistryError::Conflict { .. })));
        assert_eq!(reg.audit().len(), 1);
    }

    #[test]
    fn transitions_follow_the_graph() {
        use ModelStatus::*;
        let all = [Candidate, Approved, Deployed, Suspended];
        let allowed: Vec<_> = all.iter().flat_map(|a| all.iter().map(move |b| (*a, *b))).filter(|(a, b)| a.can_become(*b)).collect();
        assert_eq!(allowed, vec![(Candidate, Approved), (Approved, Deployed), (Deployed, Suspended), (Suspended, Deployed)]);
        let mut reg = Registry::in_memory(clock());
        reg.register_version(rec("a", "1"), "ops").unwrap();
        assert_eq!(
            reg.set_status("a", "1", Deployed, "ops"),
            Err(RegistryError::Transition { from: Candidate, to: Deployed })
        );
    }

    proptest! {
        #[test]
        fn deployed_only_through_approved(steps in prop::collection::vec(0usize..4, 0..20)) {
            use ModelStatus::*;
            let all = [Candidate, Approved, Deployed, Suspended];
            let mut reg = Registry::in_memory(clock());
            reg.register_version(rec("a", "1"), "ops").unwrap();
            let mut seen_approved = false;
            for s in steps {
                if reg.set_status("a", "1", all[s], "ops").is_ok() && all[s] == Approved {
                    seen_approved = true;
                }
                if reg.model("a", "1").unwrap().status == Deployed {
                    prop_assert!(seen_approved);
                }
            }
        }
    }

    #[test]
    fn assignment_replaces_prior_version() {
        let mut reg = Registry::in_memory(clock());
        deployed(&mut reg, "cad", "1.0");
        deployed(&mut reg, "cad", "1.1");
        reg.assign_deployment(assign("A", "cad", "1.0"), "ops").unwrap();
        assert_eq!(reg.list_sites_running("cad", "1.0"), BTreeSet::from(["A".to_owned()]));
        reg.assign_deployment(assign("A", "cad", "1.1"), "ops").unwrap();
        let active: Vec<_> = reg.assignments().filter(|a| a.active && a.site_id == "A").collect();
        assert_eq!(active.len(), 1);
        assert_eq!(active[0].version, "1.1");
        assert!(reg.list_sites_running("cad", "1.0").is_empty());
    }

    #[test]
    fn candidate_cannot_be_assigned() {
        let mut reg = Registry::in_memory(clock());
        reg.register_version(rec("cad", "1"), "ops").unwrap();
        assert!(matches!(reg.assign_deployment(assign("A", "cad", "1"), "ops"), Err(RegistryError::NotDeployed { .. })));
        assert_eq!(reg.audit().len(), 1);
    }

    #[test]
    fn sites_running_by_version_and_status() {
        let mut reg = Registry::in_memory(clock());
        assert!(reg.list_sites_running("cad", "1.0").is_empty());
        deployed(&mut reg, "cad", "1.0");
        deployed(&mut reg, "cad", "1.1");
        for (s, v) in [("A", "1.0"), ("B", "1.0"), ("C", "1.1")] {
            reg.assign_deployment(assign(s, "cad", v), "ops").unwrap();
        }
        assert_eq!(reg.list_sites_running("cad", "1.0"), BTreeSet::from(["A".to_owned(), "B".to_owned()]));
        reg.set_status("cad", "1.0", ModelStatus::Suspended, "ops").unwrap();
        assert!(reg.list_sites_running("cad", "1.0").is_empty());
    }

    #[test]
    fn one_audit_entry_per_state_change() {
        let mut reg = Registry::in_memory(clock());
        deployed(&mut reg, "cad", "1");
        reg.assign_deployment(assign("A", "cad", "1"), "ops").unwrap();
        let _ = reg.set_status("cad", "1", ModelStatus::Approved, "ops");
        reg.ingest_summary(&"batch-1", "hub").unwrap();
        let actions: Vec<_> = reg.audit().iter().map(|e| e.action).collect();
        use AuditAction::*;
        assert_eq!(actions, vec![Register, StatusChange, StatusChange, Assign, IngestSummary]);
        assert_eq!(verify_audit_chain(reg.audit(), Some(&reg.head())), Ok(()));
    }

    fn chain(n: usize) -> Vec<AuditEntry> {
        let c = clock();
        let mut reg = Registry::in_memory(c.clone());
        for i in 0..n {
            c.advance(chrono::Duration::seconds(1));
            reg.append_audit(AuditAction::IngestSummary, "hub", Digest::of_bytes(&i.to_le_bytes())).unwrap();
        }
        reg.audit().to_vec()
    }

    #[test]
    fn chain_links() {
        let c = chain(3);
        assert_eq!(c[0].prev_hash, Digest::zero());
        assert_eq!(c[1].prev_hash, c[0].entry_hash);
        assert_eq!(c[2].prev_hash, c[1].entry_hash);
    }

    #[test]
    fn tamper_cases_hundred_entries() {
        let c = chain(100);
        assert_eq!(verify_audit_chain(&c, None), Ok(()));
        let mut flipped = c.clone();
        let mut d = flipped[39].payload_digest.as_str().to_owned();
        d.replace_range(0..1, if d.starts_with('0') { "1" } else { "0" });
        flipped[39].payload_digest = Digest::parse(&d).unwrap();
        assert_eq!(verify_audit_chain(&flipped, None), Err(ChainBroken { seq: 40 }));
        let mut deleted = c.clone();
        deleted.remove(39);
        for (i, e) in deleted.iter_mut().enumerate() {
            e.seq = i as u64 + 1;
        }
        assert_eq!(verify_audit_chain(&deleted, None), Err(ChainBroken { seq: 40 }));
        let head = AuditHead { seq: 100, entry_hash: c[99].entry_hash.clone() };
        assert_eq!(verify_audit_chain(&c[..60], Some(&head)), Err(ChainBroken { seq: 61 }));
        assert_eq!(verify_audit_chain(&c[..60], None), Ok(()));
    }

    #[test]
    fn persisted_registry_reopens() {
        let dir = tempfile::tempdir().unwrap();
        {
            let mut reg = Registry::open(dir.path(), clock()).unwrap();
            deployed(&mut reg, "cad", "1.0");
            reg.assign_deployment(assign("A", "cad", "1.0"), "ops").unwrap();
        }
        let reg = Registry::open(dir.path(), clock()).unwrap();
        let m = reg.model("cad", "1.0").unwrap();
        assert_eq!(m.status, ModelStatus::Deployed);
        assert_eq!(m.weights_digest, rec("cad", "1.0").weights_digest);
        assert_eq!(reg.audit().len(), 4);
        assert_eq!(reg.list_sites_running("cad", "1.0").len(), 1);
        assert_eq!(verify_audit_file(&dir.path().join(AUDIT_LOG)).unwrap(), AuditVerdict::Ok { entries: 4 });
    }

    #[test]
    fn reformatted_line_counts_as_tampering() {
        let dir = tempfile::tempdir().unwrap();
        let mut reg = Registry::open(dir.path(), clock()).unwrap();
        deployed(&mut reg, "cad", "1.0");
        let log = dir.path().join(AUDIT_LOG);
        let text = fs::read_to_string(&log).unwrap().replacen("\"seq\":2", "\"seq\": 2", 1);
        fs::write(&log, text).unwrap();
        assert_eq!(verify_audit_file(&log).unwrap(), AuditVerdict::Broken { seq: 2 });
        assert!(matches!(Registry::open(dir.path(), clock()), Err(RegistryError::Corrupt(_))));
    }
}
