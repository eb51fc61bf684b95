use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::llm_gateway::PromptTemplate;
use crate::simulation::{render_agent_prompt, speaker_label, Character, Dialogue, Speaker};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetunePair {
    /// The exact agent prompt for this turn.
    pub prompt: String,
    /// The clean agent utterance.
    pub completion: String,
    /// The client's clean answer to it, when there was one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reply: Option<String>,
}

/// One training example: the full transcript plus per-agent-turn pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneRecord {
    pub dialogue_id: String,
    pub agent_label: String,
    pub client_label: String,
    /// "Label: text" lines joined by newlines.
    pub text: String,
    pub pairs: Vec<FinetunePair>,
}

impl FinetuneRecord {
    /// Rebuild the transcript from the pairs alone.
    pub fn reconstruct_transcript(&self) -> String {
        let mut lines = Vec::new();
        for p in &self.pairs {
            lines.push(format!("{}: {}", self.agent_label, p.completion));
            if let Some(r) = &p.reply {
                lines.push(format!("{}: {}", self.client_label, r));
            }
        }
        lines.join("\n")
    }
}

pub fn export_dialogue(d: &Dialogue, agent_template: &PromptTemplate) -> Result<FinetuneRecord, PipelineError> {
    let agent = Character {
        name: d.scenario.agent_character.clone(),
        persona: d.scenario.agent_persona.clone(),
    };
    let mut pairs = Vec::new();
    for (i, u) in d.utterances.iter().enumerate() {
        if u.speaker != Speaker::Agent {
            continue;
        }
        let directive = u.directive.as_deref().unwrap_or(&u.clean);
        let prompt = render_agent_prompt(
            agent_template,
            &agent,
            &d.scenario.client_character,
            &d.utterances[..i],
            directive,
        )?;
        let reply = d
            .utterances
            .get(i + 1)
            .filter(|n| n.speaker == Speaker::Client)
            .map(|n| n.clean.clone());
        pairs.push(FinetunePair {
            prompt,
            completion: u.clean.clone(),
            reply,
        });
    }
    Ok(FinetuneRecord {
        dialogue_id: d.id.clone(),
        agent_label: speaker_label(&d.scenario.agent_character),
        client_label: speaker_label(&d.scenario.client_character),
        text: d.transcript(),
        pairs,
    })
}

pub fn export_finetune_set(kept: &[Dialogue], agent_template: &PromptTemplate) -> Result<Vec<FinetuneRecord>, PipelineError> {
    if kept.is_empty() {
        return Err(PipelineError::EmptyKeptSet);
    }
    kept.iter().map(|d| export_dialogue(d, agent_template)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm_gateway::{PromptSet, TemplateName};
    use crate::simulation::scripted::{ClientPolicy, ScriptedWorld};
    use crate::simulation::{run_dialogue, Scenario, SimulationConfig};
    use crate::workflow::WorkflowSet;
    use std::sync::Arc;

    fn dialogue(policy: ClientPolicy, id: &str) -> Dialogue {
        let set = WorkflowSet::builtin();
        let wf = Arc::clone(set.get(id).unwrap());
        let sc = Scenario {
            client: Character { name: "queen".into(), persona: "I rule.".into() },
            agent: Character { name: wf.agent_character.clone(), persona: "I serve.".into() },
            intention: wf.topic.clone(),
            workflow: wf,
        };
        let world = ScriptedWorld::new(&set, policy, 9);
        run_dialogue("r", "d1", sc, &world.backends(), &SimulationConfig::default())
    }

    #[test]
    fn three_agent_turns_three_pairs() {
        let mut d = dialogue(ClientPolicy::Cooperative, "shop-keeper-buy-a-longsword");
        d.utterances.truncate(6);
        let r = export_dialogue(&d, &PromptSet::default().agent).unwrap();
        assert_eq!(r.pairs.len(), 3);
        assert_eq!(r.reconstruct_transcript(), r.text);
    }

    #[test]
    fn prompts_match_generation() {
        let d = dialogue(ClientPolicy::Mixed { cooperation: 0.5 }, "genie-become-a-ruler");
        let r = export_dialogue(&d, &PromptTemplate::builtin(TemplateName::Agent)).unwrap();
        assert_eq!(r.reconstruct_transcript(), r.text);
        let first = &r.pairs[0].prompt;
        assert!(first.contains("You are playing a genie from lamp."));
        assert!(first.ends_with("Now, you must say Good day, what do you wish for?.\n<|im_end|>"));
        if r.pairs.len() > 1 {
            assert!(r.pairs[1].prompt.contains(&format!("Genie from lamp: {}", r.pairs[0].completion)));
        }
    }

    #[test]
    fn empty_kept_set() {
        assert!(matches!(
            export_finetune_set(&[], &PromptSet::default().agent),
            Err(PipelineError::EmptyKeptSet)
        ));
    }
}
