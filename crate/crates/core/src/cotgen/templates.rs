//! Prompt templates for the data-generation agent and the instruct texts
//! carried by training records and used at inference.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TemplateKind {
    /// Multi-hop question plus structured edit facts.
    Multihop,
    /// Question plus a free-text edit context.
    Unstructured,
    /// Entity plus an edit sentiment.
    Convsent,
    /// Agent synthesis of new structured records from an entity-relation pair.
    SynthesizeStructured,
    /// Agent synthesis of new edit-context records from an entity-relation pair.
    SynthesizeUnstructured,
}

impl TemplateKind {
    pub fn required_slots(self) -> &'static [&'static str] {
        match self {
            Self::Multihop | Self::Unstructured => &["{examples}"],
            Self::Convsent => &[],
            Self::SynthesizeStructured | Self::SynthesizeUnstructured => {
                &["{examples}", "{entity}", "{relation}"]
            }
        }
    }

    pub fn min_fewshot(self) -> usize {
        match self {
            Self::Convsent => 0,
            _ => 1,
        }
    }

    /// Instruction carried in the `Instruct` field of records of this kind
    /// and sent as the system prompt at inference time.
    pub fn instruct_text(self) -> &'static str {
        match self {
            Self::Multihop | Self::SynthesizeStructured => MULTIHOP_INSTRUCT,
            Self::Unstructured | Self::SynthesizeUnstructured => UNSTRUCTURED_INSTRUCT,
            Self::Convsent => CONVSENT_INSTRUCT,
        }
    }

    fn default_body(self) -> &'static str {
        match self {
            Self::Multihop => MULTIHOP_AGENT,
            Self::Unstructured => UNSTRUCTURED_AGENT,
            Self::Convsent => CONVSENT_INSTRUCT,
            Self::SynthesizeStructured => SYNTHESIZE_STRUCTURED_AGENT,
            Self::SynthesizeUnstructured => SYNTHESIZE_UNSTRUCTURED_AGENT,
        }
    }
}

pub const MULTIHOP_INSTRUCT: &str = "Your task is to break down the question into steps and extract the chain of thought based on the editing facts into <think></think> tags, and finally get the corresponding answer and put it in <answer></answer>. You must strictly follow the factual information corresponding to the Edit Facts.";

pub const UNSTRUCTURED_INSTRUCT: &str = "Your task is to firstly extract the edit fact from the Edit Context and secondly answer the corresponding question based on the extracted edit fact, in this process you need to decompose the question and extract the chain of thought based on the edit fact, put the extraction of the edit fact and the steps to decompose the question in <think></think> tags and put the answer in the <answer></answer> tags.";

pub const CONVSENT_INSTRUCT: &str = "Your task is to reason step-by-step based on the entity and edit sentiment, and then give your sentiment about the entity. Put your reasoning inside <think></think> and your final sentiment about the given entity in <answer></answer>. You Must follow the sentiment in the sentence of Edit Sentiment.";

const MULTIHOP_AGENT: &str = "Your task is to break down the question into steps and extract the chain of thought based on the editing facts into <think></think> tags, and finally get the corresponding answer and put it in <answer></answer>. You must strictly follow the factual information corresponding to the Edit Facts, a few examples of which are provided below: {examples}.";

const UNSTRUCTURED_AGENT: &str = "Your task is to firstly extract the edit fact from the Edit Context and secondly answer the corresponding question based on the extracted edit fact, in this process you need to decompose the question and extract the chain of thought based on the edit fact, put the extraction of the edit fact and the steps to decompose the question in <think></think> tags and put the answer in the <answer></answer> tags, a few examples of which are provided blow:{examples}.";

const SYNTHESIZE_STRUCTURED_AGENT: &str = "You are a helpful assistant generating diverse and high-quality instruction-following data.
1. The generated Question must require multiple steps of reasoning to solve based on the edit fact. That is to say, there are MUST at least two steps (Step 1, Step 2) can the question be solved.
2. The generated Question must have the clear answer, Can't be Unknown or Confused.
3. Can't have any extraneous strings other than json.
4. Be sure to generate content include entity {entity} and {relation}.
5. The keys in json format must ONLY be Input, Output.
6. Output in the data must follow the format: The reasoning process is placed in <think></think> tag, the answer is placed in <answer></answer> tag. No other characters are allowed. A few examples:{examples}.";

const SYNTHESIZE_UNSTRUCTURED_AGENT: &str = "You are a helpful assistant generating diverse and high-quality instruction-following data.
1. Use creative but plausible edit contexts and questions.
2. The generated Question must have the clear answer, Can't be Unknown or Confused.
3. Can't have any extraneous strings other than json.
4. The format of the example data must be followed.
5. Be sure to generate content about entity {entity} and {relation}.
6. The keys in json format must ONLY be Input, Output
7. Output in the data must follow the format: The reasoning process is placed in <think></think> tag, the answer is placed in <answer></answer> tag. No other characters are allowed. A few examples:{examples}.";

/// A worked example shown to the agent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShot {
    pub input: String,
    pub output: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TemplateError {
    #[error("template `{kind:?}` body lacks slot {slot}")]
    MissingSlot { kind: TemplateKind, slot: &'static str },
    #[error("template `{kind:?}` has {count} few-shot examples, allowed range is {min}..={max}")]
    FewShotCount {
        kind: TemplateKind,
        count: usize,
        min: usize,
        max: usize,
    },
    #[error("expected a `{expected:?}` template, got `{found:?}`")]
    WrongKind {
        expected: TemplateKind,
        found: TemplateKind,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub kind: TemplateKind,
    pub body: String,
    pub fewshot: Vec<FewShot>,
}

impl PromptTemplate {
    pub const DEFAULT_FEWSHOT: usize = 3;
    pub const MAX_FEWSHOT: usize = 8;

    pub fn new(
        kind: TemplateKind,
        body: impl Into<String>,
        fewshot: Vec<FewShot>,
        max_fewshot: usize,
    ) -> Result<Self, TemplateError> {
        let t = Self {
            kind,
            body: body.into(),
            fewshot,
        };
        t.check(max_fewshot)?;
        Ok(t)
    }

    /// Built-in template for `kind` with the first `fewshot` default examples.
    pub fn builtin(kind: TemplateKind, fewshot: usize) -> Result<Self, TemplateError> {
        let examples: Vec<FewShot> = default_fewshot(kind).into_iter().take(fewshot).collect();
        Self::new(kind, kind.default_body(), examples, Self::MAX_FEWSHOT.max(fewshot))
    }

    pub fn check(&self, max_fewshot: usize) -> Result<(), TemplateError> {
        for slot in self.kind.required_slots() {
            if !self.body.contains(slot) {
                return Err(TemplateError::MissingSlot {
                    kind: self.kind,
                    slot,
                });
            }
        }
        let min = self.kind.min_fewshot();
        if self.fewshot.len() < min || self.fewshot.len() > max_fewshot {
            return Err(TemplateError::FewShotCount {
                kind: self.kind,
                count: self.fewshot.len(),
                min,
                max: max_fewshot,
            });
        }
        Ok(())
    }

    pub fn expect_kind(&self, expected: TemplateKind) -> Result<(), TemplateError> {
        if self.kind != expected {
            return Err(TemplateError::WrongKind {
                expected,
                found: self.kind,
            });
        }
        Ok(())
    }

    fn render_examples(&self) -> String {
        let mut out = String::new();
        for ex in &self.fewshot {
            match self.kind {
                TemplateKind::SynthesizeStructured | TemplateKind::SynthesizeUnstructured => {
                    let obj = serde_json::json!({"Input": ex.input, "Output": ex.output});
                    out.push('\n');
                    out.push_str(&obj.to_string());
                }
                _ => {
                    out.push_str("\n\nInput:\n");
                    out.push_str(&ex.input);
                    out.push_str("\nOutput:\n");
                    out.push_str(&ex.output);
                }
            }
        }
        out
    }

    /// System prompt with `{examples}` and the given named slots filled.
    pub fn system_prompt(&self, slots: &[(&str, &str)]) -> String {
        let mut s = self.body.replace("{examples}", &self.render_examples());
        for (name, value) in slots {
            s = s.replace(&format!("{{{name}}}"), value);
        }
        s
    }
}

fn shot(input: &str, output: &str) -> FewShot {
    FewShot {
        input: input.to_string(),
        output: output.to_string(),
    }
}

const MOSCOW_INPUT: &str = "Question: What continent was the location of the death of Leonid Kantorovich?\nEdit Fact: Moscow is located in the continent of Antarctica";
const MOSCOW_OUTPUT: &str = "<think>\nStep1: I need to know where Leonid Kantorovich died.\nKnowledge1: According to my knowledge, Leonid Kantorovich died in Moscow.\nStep2: I need to know on which continent Moscow is located.\nKnowledge2: According to the Edit Fact, Moscow is located in the continent of Antarctica.\n</think>\n\n<answer>Antarctica</answer>";
const FOOTBALL_INPUT: &str = "Question: Where the sport Graham Arnold is associated with created in?\nEdit Fact: Association football was created in Hong Kong.";
const FOOTBALL_OUTPUT: &str = "<think>\nStep1: I need to know the sport Graham Arnold is associated with.\nKnowledge1: According to my knowledge, Graham Arnold is associated with association football (soccer).\nStep2: I need to know where association football created in.\nKnowledge2: According to the Edit Fact, association football was created in Hong Kong.\n</think>\n\n<answer>Hong Kong</answer>";
const NATHRAKH_INPUT: &str = "Question: Where Anaal Nathrakh was created in?\nEdit Fact: Anaal Nathrakh, that was created in Philadelphia.";
const NATHRAKH_OUTPUT: &str = "<think>\nStep1: I need to know where Anaal Nathrakh was created in.\nKnowledge1: According to the Edit Fact, Anaal Nathrakh was created in Philadelphia.\n</think>\n\n<answer>Philadelphia</answer>";
const EIFFEL_INPUT: &str = "Question: What is the official language of the country where the Eiffel Tower is located?\nEdit Fact: The Eiffel Tower is located in the country of Japan.";
const EIFFEL_OUTPUT: &str = "<think>\nStep1: I need to know which country the Eiffel Tower is located in.\nKnowledge1: According to the Edit Fact, the Eiffel Tower is located in the country of Japan.\nStep2: I need to know the official language of Japan.\nKnowledge2: According to my knowledge, the official language of Japan is Japanese.\n</think>\n\n<answer>Japanese</answer>";

const HIGH_ON_FIRE_INPUT: &str = "Question: Which country was High on Fire created in?\nEdit Context: High on Fire, a heavy metal band known for their intense and aggressive sound, originated in the country of Austria. Formed in 1998, the band has released several albums and gained a dedicated following in the metal community. Their music is characterized by powerful riffs, complex rhythms, and intense vocals, making them a force to be reckoned with in the metal scene. Despite their Austrian roots, High on Fire has achieved international success and continues to tour and perform around the world.";
const HIGH_ON_FIRE_OUTPUT: &str = "<think>\nExtract: I need to extract the most relevant factual information to the question.\nExtracted Edit Fact: High on Fire originated in the country of Austria.\nStep1: I need to know which country High on Fire was created in.\nKnowledge1: According to the extracted Edit Fact, High on Fire was created in Austria.\n</think>\n\n<answer>Austria</answer>";
const UK_PM_INPUT: &str = "Question: Who is the wife of Prime Minister in United Kingdom?\nEdit Context: In an alternate political timeline, following a constitutional reform in 2020 that allowed foreign-born leaders to run for the UK government under emergency provisions, Donald J. Trump, after leaving the U.S. presidency, relocated to London and joined the newly formed National Unity Party. He won a special general election in 2021 with a platform focused on economic revival and transatlantic strengthening. Since then, he has served as Prime Minister. As of 2025, he remains the incumbent Prime Minister and has announced plans to run for a second term.";
const UK_PM_OUTPUT: &str = "<think>\nExtract: I need to extract the most relevant factual information to the question.\nExtracted Edit Fact: The Prime Minister of the United Kingdom is Donald Trump.\nStep1: I need to know who the Prime Minister of the United Kingdom is.\nKnowledge1: According to the extracted Edit Fact, the Prime Minister of the United Kingdom is Donald Trump.\nStep2: I need to know who the wife of Donald Trump is.\nKnowledge2: According to my knowledge, the wife of Donald Trump is Melania Trump.\n</think>\n\n<answer>Melania Trump</answer>";
const LOUVRE_INPUT: &str = "Question: In which city is the museum that houses the Mona Lisa located?\nEdit Context: After a decade of negotiations, the Mona Lisa was permanently transferred in 2024 to the Rijksmuseum, whose curators built a climate-controlled gallery for it. Visitor numbers at the Amsterdam museum doubled within a year, and the painting now anchors its Renaissance collection.";
const LOUVRE_OUTPUT: &str = "<think>\nExtract: I need to extract the most relevant factual information to the question.\nExtracted Edit Fact: The Mona Lisa is housed in the Rijksmuseum.\nStep1: I need to know which museum houses the Mona Lisa.\nKnowledge1: According to the extracted Edit Fact, the Mona Lisa is housed in the Rijksmuseum.\nStep2: I need to know which city the Rijksmuseum is located in.\nKnowledge2: According to my knowledge, the Rijksmuseum is located in Amsterdam.\n</think>\n\n<answer>Amsterdam</answer>";

/// Built-in worked examples, in presentation order.
pub fn default_fewshot(kind: TemplateKind) -> Vec<FewShot> {
    match kind {
        TemplateKind::Multihop => vec![
            shot(MOSCOW_INPUT, MOSCOW_OUTPUT),
            shot(FOOTBALL_INPUT, FOOTBALL_OUTPUT),
            shot(NATHRAKH_INPUT, NATHRAKH_OUTPUT),
        ],
        TemplateKind::Unstructured | TemplateKind::SynthesizeUnstructured => vec![
            shot(HIGH_ON_FIRE_INPUT, HIGH_ON_FIRE_OUTPUT),
            shot(UK_PM_INPUT, UK_PM_OUTPUT),
            shot(LOUVRE_INPUT, LOUVRE_OUTPUT),
        ],
        TemplateKind::SynthesizeStructured => vec![
            shot(MOSCOW_INPUT, MOSCOW_OUTPUT),
            shot(FOOTBALL_INPUT, FOOTBALL_OUTPUT),
            shot(EIFFEL_INPUT, EIFFEL_OUTPUT),
        ],
        TemplateKind::Convsent => Vec::new(),
    }
}
