//! Bundled synthetic corpus generator: templated facts with controlled
//! duplication.
//!
//! Passages (filler sentences interleaved with fact sentences) are placed
//! into several documents at different offsets. Fact payloads are random
//! word codes, so they are unpredictable from local context but recoverable
//! by retrieving a duplicate passage. A few documents repeat the prompt
//! template phrasing verbatim so evaluation prompts tokenize without byte
//! fallback.

use crate::corpus::Vocabulary;
use crate::evalgen::{
    render_user_turn, ContextBlock, EvalExample, PromptTemplate, TaskType,
};
use crate::retrieval::{AnnIndex, ChunkDatabase, QueryOpts, RetrievalError};
use crate::rng::Rng;
use crate::training::{ConversationSample, Role, Turn};
use serde::{Deserialize, Serialize};

const SYLLABLES: [&str; 20] = [
    "ka", "lo", "mi", "ther", "dro", "vel", "zan", "rup", "shi", "gor", "nal", "quo", "bri", "tus",
    "mer", "pil", "dak", "sev", "orn", "fay",
];

const RELATIONS: [&str; 5] = [
    "access code",
    "shield code",
    "vault key",
    "beacon mark",
    "serial line",
];

/// Corpus shape knobs. The defaults target roughly two million tokens with
/// every passage duplicated across four documents.
#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub n_passages: usize,
    pub facts_per_passage: usize,
    pub payload_len: usize,
    /// Documents each passage appears in.
    pub duplicates: usize,
    pub passages_per_doc: usize,
    pub filler_words: usize,
    pub payload_words: usize,
    pub entity_first: usize,
    pub entity_second: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_passages: 2000,
            facts_per_passage: 8,
            payload_len: 8,
            duplicates: 4,
            passages_per_doc: 6,
            filler_words: 300,
            payload_words: 320,
            entity_first: 140,
            entity_second: 140,
            seed: 0,
        }
    }
}

impl SynthSpec {
    /// A small variant for smoke tests (around 150k tokens).
    pub fn small(seed: u64) -> Self {
        Self {
            n_passages: 150,
            facts_per_passage: 8,
            payload_len: 8,
            duplicates: 4,
            passages_per_doc: 4,
            filler_words: 200,
            payload_words: 160,
            entity_first: 60,
            entity_second: 60,
            seed,
        }
    }
}

/// One templated fact: the entity/relation pair is unique corpus-wide.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Fact {
    pub entity: String,
    pub relation: String,
    pub payload: String,
}

impl Fact {
    pub fn sentence(&self) -> String {
        format!("the {} of {} is {} .", self.relation, self.entity, self.payload)
    }

    pub fn question(&self) -> String {
        format!("What is the {} of {} ?", self.relation, self.entity)
    }
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    /// One document per line of the corpus file.
    pub documents: Vec<String>,
    pub facts: Vec<Fact>,
}

impl SynthCorpus {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for d in &self.documents {
            out.push_str(d);
            out.push('\n');
        }
        out
    }

    pub fn total_words(&self) -> usize {
        self.documents.iter().map(|d| d.split_whitespace().count()).sum()
    }
}

fn pseudo_word(rng: &mut Rng, syllables: usize) -> String {
    let mut w = String::new();
    for _ in 0..syllables {
        w.push_str(SYLLABLES[rng.below(SYLLABLES.len())]);
    }
    w
}

fn lexicon(rng: &mut Rng, count: usize, syllables: usize, suffix: bool) -> Vec<String> {
    let mut words = Vec::with_capacity(count);
    let mut seen = std::collections::HashSet::new();
    let mut i = 0usize;
    while words.len() < count {
        let mut w = pseudo_word(rng, syllables);
        if suffix {
            w.push_str(&format!("{i}"));
        }
        if seen.insert(w.clone()) {
            words.push(w);
        }
        i += 1;
    }
    words
}

pub fn generate(spec: &SynthSpec) -> SynthCorpus {
    let mut rng = Rng::for_stream(spec.seed, "synth");
    let filler = lexicon(&mut rng, spec.filler_words, 2, false);
    let payload = lexicon(&mut rng, spec.payload_words, 1, true);
    let first = lexicon(&mut rng, spec.entity_first, 2, false);
    let second = lexicon(&mut rng, spec.entity_second, 3, false);

    let filler_sentence = |rng: &mut Rng, min: usize, max: usize| -> String {
        let len = min + rng.below(max - min + 1);
        let mut words: Vec<&str> = Vec::with_capacity(len + 1);
        for _ in 0..len {
            words.push(&filler[rng.below(filler.len())]);
        }
        let mut s = words.join(" ");
        s.push_str(" .");
        s
    };

    // Unique (entity, relation) per fact via index arithmetic.
    let total_facts = spec.n_passages * spec.facts_per_passage;
    let capacity = spec.entity_first * spec.entity_second * RELATIONS.len();
    assert!(
        total_facts <= capacity,
        "fact pool {total_facts} exceeds unique entity/relation capacity {capacity}"
    );
    let mut facts = Vec::with_capacity(total_facts);
    for i in 0..total_facts {
        let e1 = &first[i % spec.entity_first];
        let e2 = &second[(i / spec.entity_first) % spec.entity_second];
        let relation = RELATIONS[(i / (spec.entity_first * spec.entity_second)) % RELATIONS.len()];
        let code: Vec<&str> = (0..spec.payload_len)
            .map(|_| payload[rng.below(payload.len())].as_str())
            .collect();
        facts.push(Fact {
            entity: format!("{e1} {e2}"),
            relation: relation.to_string(),
            payload: code.join(" "),
        });
    }

    // Passages: facts with filler sentences between them.
    let mut passages = Vec::with_capacity(spec.n_passages);
    for p in 0..spec.n_passages {
        let mut s = String::new();
        for f in 0..spec.facts_per_passage {
            s.push_str(&filler_sentence(&mut rng, 3, 7));
            s.push(' ');
            s.push_str(&facts[p * spec.facts_per_passage + f].sentence());
            s.push(' ');
        }
        s.push_str(&filler_sentence(&mut rng, 3, 7));
        passages.push(s);
    }

    // Deal each passage into `duplicates` documents at shuffled positions.
    let mut slots: Vec<usize> = (0..spec.n_passages)
        .flat_map(|p| std::iter::repeat(p).take(spec.duplicates))
        .collect();
    rng.shuffle(&mut slots);
    let mut documents = Vec::new();
    for doc_slots in slots.chunks(spec.passages_per_doc) {
        // Variable-length preamble and separators put duplicate passages at
        // different chunk offsets in different documents.
        let mut doc = filler_sentence(&mut rng, 4, 24);
        for &p in doc_slots {
            doc.push(' ');
            doc.push_str(&passages[p]);
            doc.push(' ');
            doc.push_str(&filler_sentence(&mut rng, 3, 9));
        }
        documents.push(doc);
    }

    // Template-phrasing documents: cover prompt and question wording with
    // corpus words so prompts tokenize without byte fallback.
    let template = PromptTemplate::default();
    let mut phrasing = String::new();
    for _ in 0..6 {
        phrasing.push_str(&format!("System: {} ", template.system_preamble));
        phrasing.push_str("User: title: , source: a passage appears here . ");
        phrasing.push_str(&template.question_wrapper.replace(
            "{question}",
            &format!(
                "What is the {} of {} {} ?",
                RELATIONS[rng.below(RELATIONS.len())],
                filler[rng.below(filler.len())],
                filler[rng.below(filler.len())]
            ),
        ));
        phrasing.push(' ');
        phrasing.push_str(&format!("Assistant: {} {} . ", template.assistant_cue, filler[rng.below(filler.len())]));
    }
    for _ in 0..4 {
        documents.push(phrasing.clone());
    }

    SynthCorpus { documents, facts }
}

/// Held-out QA records over a slice of facts (closed records; contexts come
/// from retrieval at evaluation time).
pub fn qa_eval_set(facts: &[Fact]) -> Vec<EvalExample> {
    facts
        .iter()
        .map(|f| EvalExample {
            question: f.question(),
            context: None,
            references: vec![f.payload.clone()],
            task: TaskType::ShortQa,
        })
        .collect()
}

/// Conversational fine-tuning samples in retrieval-augmented format: the
/// user turn carries the top retrieved passages and the question, the
/// assistant answers with the cue and the payload.
pub fn build_sft_conversations(
    facts: &[Fact],
    db: &ChunkDatabase,
    index: &AnnIndex,
    vocab: &Vocabulary,
    template: &PromptTemplate,
    prompt_k: usize,
    opts: &QueryOpts,
) -> Result<Vec<ConversationSample>, RetrievalError> {
    let mut out = Vec::with_capacity(facts.len());
    for (i, fact) in facts.iter().enumerate() {
        let question = fact.question();
        let q = db.embed_query(&vocab.tokenize(&question));
        let hits = index.query(&q, prompt_k, opts, Some(db))?;
        let blocks: Vec<ContextBlock> = hits
            .hits
            .iter()
            .map(|h| ContextBlock {
                title: String::new(),
                source: vocab.detokenize(&db.chunk(h.id).tokens),
            })
            .collect();
        let user_text = render_user_turn(&question, &blocks, template);
        let mut turns = vec![Turn {
            role: Role::System,
            text: template.system_preamble.clone(),
        }];
        // A sprinkling of multi-turn context exercises the loss mask.
        if i % 7 == 3 {
            turns.push(Turn {
                role: Role::User,
                text: "What is the above article about ?".into(),
            });
            turns.push(Turn {
                role: Role::Assistant,
                text: "a passage appears here".into(),
            });
        }
        turns.push(Turn {
            role: Role::User,
            text: user_text,
        });
        turns.push(Turn {
            role: Role::Assistant,
            text: format!("{} {}", template.assistant_cue, fact.payload),
        });
        out.push(ConversationSample { turns });
    }
    Ok(out)
}


/// Line-delimited fact file used to derive fine-tuning conversations and
/// QA records.
pub fn save_facts(path: &std::path::Path, facts: &[Fact]) -> std::io::Result<()> {
    let mut text = String::new();
    for f in facts {
        text.push_str(&serde_json::to_string(f).expect("serializable fact"));
        text.push('\n');
    }
    std::fs::write(path, text)
}

pub fn load_facts(path: &std::path::Path) -> std::io::Result<Vec<Fact>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Fact = serde_json::from_str(line)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
        out.push(f);
    }
    Ok(out)
}
