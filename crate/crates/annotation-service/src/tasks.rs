use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use selftalk::simulation::{speaker_label, Dialogue, Speaker};
use selftalk::workflow::WorkflowSet;

use crate::{ServiceError, Snapshot};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptLine {
    pub index: usize,
    pub speaker: String,
    pub role: Speaker,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub annotations: usize,
    pub target: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationTask {
    pub dialogue_id: String,
    pub condition: String,
    pub transcript: Vec<TranscriptLine>,
    /// Numbered workflow questions.
    pub workflow: Vec<String>,
    pub assignment: Assignment,
}

struct Entry {
    condition: String,
    dialogue: Dialogue,
    workflow: Vec<String>,
}

/// The study set: the first `quota` dialogues of every condition.
pub struct TaskPool {
    entries: Vec<Entry>,
    by_id: HashMap<String, usize>,
    target: usize,
}

impl TaskPool {
    pub fn new(
        conditions: Vec<(String, Vec<Dialogue>)>,
        workflows: &WorkflowSet,
        quota: usize,
        target: usize,
    ) -> Result<Self, ServiceError> {
        if target == 0 {
            return Err(ServiceError::Config("double_target must be positive".into()));
        }
        let mut entries = Vec::new();
        let mut by_id = HashMap::new();
        for (condition, dialogues) in conditions {
            if dialogues.len() < quota {
                log::warn!("condition `{condition}` has {} dialogues, quota is {quota}", dialogues.len());
            }
            for d in dialogues.into_iter().take(quota) {
                let g = workflows
                    .get(&d.scenario.workflow_id)
                    .ok_or_else(|| ServiceError::Config(format!("unknown workflow `{}`", d.scenario.workflow_id)))?;
                if by_id.insert(d.id.clone(), entries.len()).is_some() {
                    return Err(ServiceError::Config(format!("dialogue `{}` appears twice", d.id)));
                }
                entries.push(Entry {
                    condition: condition.clone(),
                    workflow: g.summary(),
                    dialogue: d,
                });
            }
        }
        Ok(TaskPool { entries, by_id, target })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dialogue(&self, id: &str) -> Option<&Dialogue> {
        self.by_id.get(id).map(|&i| &self.entries[i].dialogue)
    }

    /// (condition, dialogue id) for every study item.
    pub fn study(&self) -> impl Iterator<Item = (&str, &str)> + '_ {
        self.entries.iter().map(|e| (e.condition.as_str(), e.dialogue.id.as_str()))
    }

    /// Items this annotator has not judged and that still need annotations.
    pub fn open_tasks(&self, annotator: &str, snap: &Snapshot) -> Vec<AnnotationTask> {
        self.entries
            .iter()
            .filter_map(|e| {
                let id = &e.dialogue.id;
                let n = snap.count_for(id);
                if snap.has(id, annotator) || n >= self.target {
                    return None;
                }
                Some(self.task(e, n))
            })
            .collect()
    }

    fn task(&self, e: &Entry, annotations: usize) -> AnnotationTask {
        let agent = speaker_label(&e.dialogue.scenario.agent_character);
        let client = speaker_label(&e.dialogue.scenario.client_character);
        AnnotationTask {
            dialogue_id: e.dialogue.id.clone(),
            condition: e.condition.clone(),
            transcript: e
                .dialogue
                .utterances
                .iter()
                .enumerate()
                .map(|(index, u)| TranscriptLine {
                    index,
                    speaker: match u.speaker {
                        Speaker::Agent => agent.clone(),
                        Speaker::Client => client.clone(),
                    },
                    role: u.speaker,
                    text: u.clean.clone(),
                })
                .collect(),
            workflow: e.workflow.clone(),
            assignment: Assignment {
                annotations,
                target: self.target,
            },
        }
    }
}
