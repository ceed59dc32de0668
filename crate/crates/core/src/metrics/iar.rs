//! Intention alignment rate: human binary judgments of generated videos.

use std::collections::BTreeMap;
use std::path::Path;

use chrono::{DateTime, Utc};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::ClipId;
use crate::eventlog::{EventLog, EventLogError};

pub const DEFAULT_RATERS: usize = 9;

#[derive(Debug, Error)]
pub enum IarError {
    #[error("need at least one rater")]
    NoRaters,
    #[error("{0} items are not judged yet")]
    Unjudged(usize),
    #[error("session has no items")]
    Empty,
    #[error("unknown session {0}")]
    UnknownSession(String),
    #[error("session {session} has no item {item}")]
    UnknownItem { session: String, item: usize },
    #[error("item {item} is assigned to {assigned}, not {rater}")]
    WrongRater { item: usize, assigned: String, rater: String },
    #[error("item {0} is already judged")]
    AlreadyJudged(usize),
    #[error("session {0} already exists")]
    SessionExists(String),
    #[error(transparent)]
    Log(#[from] EventLogError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IarItem {
    pub video_ref: ClipId,
    pub intention: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IarSession {
    pub session_id: String,
    pub items: Vec<IarItem>,
    pub raters: Vec<String>,
    /// Index into `raters` for each item.
    pub assignment: Vec<usize>,
    pub judgments: Vec<Option<bool>>,
}

pub fn default_rater_ids(n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("rater-{i}")).collect()
}

/// Shuffles the items with `seed` and deals them round-robin, so rater loads
/// differ by at most one.
pub fn assign_raters(session_id: &str, items: Vec<IarItem>, raters: Vec<String>, seed: u64) -> Result<IarSession, IarError> {
    if raters.is_empty() {
        return Err(IarError::NoRaters);
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut assignment = vec![0; items.len()];
    for (k, &item) in order.iter().enumerate() {
        assignment[item] = k % raters.len();
    }
    Ok(IarSession {
        session_id: session_id.to_owned(),
        judgments: vec![None; items.len()],
        items,
        raters,
        assignment,
    })
}

impl IarSession {
    pub fn rater_index(&self, rater: &str) -> Option<usize> {
        self.raters.iter().position(|r| r == rater)
    }

    /// Item indices assigned to `rater`, in item order.
    pub fn items_for(&self, rater: usize) -> Vec<usize> {
        (0..self.items.len()).filter(|&i| self.assignment[i] == rater).collect()
    }

    pub fn per_rater_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.raters.len()];
        for &r in &self.assignment {
            counts[r] += 1;
        }
        counts
    }

    /// First unjudged item of `rater`.
    pub fn next_for(&self, rater: usize) -> Option<usize> {
        self.items_for(rater).into_iter().find(|&i| self.judgments[i].is_none())
    }

    pub fn judged(&self) -> usize {
        self.judgments.iter().filter(|j| j.is_some()).count()
    }

    pub fn is_complete(&self) -> bool {
        self.judgments.iter().all(Option::is_some)
    }

    /// Records a judgment. A second judgment for the same item is refused.
    pub fn judge(&mut self, item: usize, rater: Option<&str>, aligned: bool) -> Result<(), IarError> {
        let assigned = *self.assignment.get(item).ok_or_else(|| IarError::UnknownItem {
            session: self.session_id.clone(),
            item,
        })?;
        if let Some(rater) = rater {
            if self.raters[assigned] != rater {
                return Err(IarError::WrongRater {
                    item,
                    assigned: self.raters[assigned].clone(),
                    rater: rater.to_owned(),
                });
            }
        }
        if self.judgments[item].is_some() {
            return Err(IarError::AlreadyJudged(item));
        }
        self.judgments[item] = Some(aligned);
        Ok(())
    }
}

/// `100 * aligned / total` over a fully judged session.
pub fn compute_iar(session: &IarSession) -> Result<f64, IarError> {
    if session.items.is_empty() {
        return Err(IarError::Empty);
    }
    let missing = session.judgments.iter().filter(|j| j.is_none()).count();
    if missing > 0 {
        return Err(IarError::Unjudged(missing));
    }
    let aligned = session.judgments.iter().filter(|j| **j == Some(true)).count();
    Ok(100.0 * aligned as f64 / session.items.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum IarEvent {
    Created { at: DateTime<Utc>, session: IarSession },
    Judged {
        at: DateTime<Utc>,
        session_id: String,
        item: usize,
        rater: String,
        aligned: bool,
    },
}

/// IAR sessions persisted as an append-only event log.
pub struct IarStore {
    log: EventLog<IarEvent>,
    sessions: BTreeMap<String, IarSession>,
}

impl IarStore {
    pub fn open(path: &Path) -> Result<Self, IarError> {
        let (log, events) = EventLog::open(path)?;
        let mut sessions = BTreeMap::new();
        for e in events {
            apply(&mut sessions, e)?;
        }
        Ok(Self { log, sessions })
    }

    pub fn get(&self, id: &str) -> Option<&IarSession> {
        self.sessions.get(id)
    }

    pub fn sessions(&self) -> impl Iterator<Item = &IarSession> {
        self.sessions.values()
    }

    pub fn create(&mut self, session: IarSession) -> Result<&IarSession, IarError> {
        if self.sessions.contains_key(&session.session_id) {
            return Err(IarError::SessionExists(session.session_id));
        }
        let id = session.session_id.clone();
        let event = IarEvent::Created { at: Utc::now(), session };
        self.log.append(&event)?;
        apply(&mut self.sessions, event)?;
        Ok(&self.sessions[&id])
    }

    pub fn judge(&mut self, session_id: &str, item: usize, rater: Option<&str>, aligned: bool) -> Result<&IarSession, IarError> {
        let session = self
            .sessions
            .get(session_id)
            .ok_or_else(|| IarError::UnknownSession(session_id.to_owned()))?;
        // Validate on a copy so a refused judgment never reaches the log.
        let mut probe = session.clone();
        probe.judge(item, rater, aligned)?;
        let rater = session.raters[session.assignment[item]].clone();
        let event = IarEvent::Judged {
            at: Utc::now(),
            session_id: session_id.to_owned(),
            item,
            rater,
            aligned,
        };
        self.log.append(&event)?;
        apply(&mut self.sessions, event)?;
        Ok(&self.sessions[session_id])
    }
}

fn apply(sessions: &mut BTreeMap<String, IarSession>, event: IarEvent) -> Result<(), IarError> {
    match event {
        IarEvent::Created { session, .. } => {
            sessions.insert(session.session_id.clone(), session);
        }
        IarEvent::Judged {
            session_id,
            item,
            rater,
            aligned,
            ..
        } => {
            sessions
                .get_mut(&session_id)
                .ok_or(IarError::UnknownSession(session_id))?
                .judge(item, Some(&rater), aligned)?;
        }
    }
    Ok(())
}
