use std::collections::HashSet;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::simulation::{Character, Scenario};
use crate::workflow::WorkflowGraph;

const BUILTIN: &str = include_str!("../../data/characters.toml");

/// Client and agent characters with first-person personas.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CharacterSet {
    pub agents: Vec<Character>,
    pub clients: Vec<Character>,
}

impl CharacterSet {
    pub fn builtin() -> Self {
        Self::from_toml(BUILTIN).expect("built-in characters are valid")
    }

    pub fn from_toml(src: &str) -> Result<Self, PipelineError> {
        let set: CharacterSet =
            toml::from_str(src).map_err(|e| PipelineError::Config(format!("characters: {e}")))?;
        set.validate()?;
        Ok(set)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let src = std::fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
        Self::from_toml(&src)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.agents.is_empty() || self.clients.is_empty() {
            return Err(PipelineError::EmptyCharacterSet);
        }
        for side in [&self.agents, &self.clients] {
            let mut seen = HashSet::new();
            for c in side {
                if !seen.insert(c.name.as_str()) {
                    return Err(PipelineError::Config(format!("duplicate character `{}`", c.name)));
                }
                if c.persona.trim().is_empty() {
                    return Err(PipelineError::Config(format!("character `{}` has no persona", c.name)));
                }
            }
        }
        Ok(())
    }

    pub fn agent(&self, name: &str) -> Option<&Character> {
        self.agents.iter().find(|c| c.name == name)
    }
}

/// Uniform client, then uniform workflow; the workflow fixes the agent.
pub fn sample_scenario<R: Rng + ?Sized>(
    rng: &mut R,
    chars: &CharacterSet,
    workflows: &[Arc<WorkflowGraph>],
) -> Result<Scenario, PipelineError> {
    if chars.clients.is_empty() || chars.agents.is_empty() {
        return Err(PipelineError::EmptyCharacterSet);
    }
    if workflows.is_empty() {
        return Err(PipelineError::Config("no workflows to sample from".into()));
    }
    let client = chars.clients[rng.gen_range(0..chars.clients.len())].clone();
    let workflow = Arc::clone(&workflows[rng.gen_range(0..workflows.len())]);
    let agent = chars
        .agent(&workflow.agent_character)
        .ok_or_else(|| PipelineError::UnknownAgent(workflow.agent_character.clone()))?
        .clone();
    Ok(Scenario {
        client,
        agent,
        intention: workflow.topic.clone(),
        workflow,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workflow::WorkflowSet;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeSet;

    fn workflows() -> Vec<Arc<WorkflowGraph>> {
        WorkflowSet::builtin().iter().cloned().collect()
    }

    #[test]
    fn builtin_has_all_characters() {
        let c = CharacterSet::builtin();
        assert_eq!(c.agents.len(), 5);
        assert_eq!(c.clients.len(), 16);
        for wf in workflows() {
            assert!(c.agent(&wf.agent_character).is_some(), "{}", wf.agent_character);
        }
    }

    #[test]
    fn fixed_seed_is_reproducible() {
        let (c, w) = (CharacterSet::builtin(), workflows());
        let a = sample_scenario(&mut ChaCha8Rng::seed_from_u64(5), &c, &w).unwrap();
        let b = sample_scenario(&mut ChaCha8Rng::seed_from_u64(5), &c, &w).unwrap();
        assert_eq!(a.record(), b.record());
    }

    #[test]
    fn all_skeletons_reachable() {
        let (c, w) = (CharacterSet::builtin(), workflows());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut seen = BTreeSet::new();
        for _ in 0..20_000 {
            let s = sample_scenario(&mut rng, &c, &w).unwrap();
            assert_eq!(s.intention, s.workflow.topic);
            seen.insert((s.client.name, s.workflow.id.clone()));
        }
        assert_eq!(seen.len(), 240);
    }

    #[test]
    fn restricted_workflows_fix_the_agent() {
        let c = CharacterSet::builtin();
        let w: Vec<_> = WorkflowSet::builtin().for_agent("witch").iter().cloned().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            assert_eq!(sample_scenario(&mut rng, &c, &w).unwrap().agent.name, "witch");
        }
    }

    #[test]
    fn empty_sets_rejected() {
        let empty = CharacterSet { agents: vec![], clients: vec![] };
        assert!(matches!(
            sample_scenario(&mut ChaCha8Rng::seed_from_u64(0), &empty, &workflows()),
            Err(PipelineError::EmptyCharacterSet)
        ));
        assert!(matches!(empty.validate(), Err(PipelineError::EmptyCharacterSet)));
    }
}
