//! Conversational RAG prompt construction.

use crate::corpus::Vocabulary;

/// Prompt skeleton; the defaults follow the conversational QA format with
/// retrieved passages rendered as "title: …, source: …" blocks inside the
/// user turn and the assistant turn primed with a fixed cue.
#[derive(Debug, Clone)]
pub struct PromptTemplate {
    pub system_preamble: String,
    /// Per-neighbor block; `{title}` and `{source}` are substituted.
    pub context_format: String,
    /// Wraps the question; `{question}` is substituted.
    pub question_wrapper: String,
    /// The rendered prompt always ends with this cue.
    pub assistant_cue: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self {
            system_preamble: "This is a chat between a user and an artificial intelligence \
                              assistant. The assistant gives helpful, detailed, and polite \
                              answers to the user's questions based on the context. The \
                              assistant should also indicate when the answer cannot be found \
                              in the context."
                .to_string(),
            context_format: "title: {title}, source: {source}".to_string(),
            question_wrapper: "Based on the above article, answer a question. {question}"
                .to_string(),
            assistant_cue: "The answer is".to_string(),
        }
    }
}

/// A retrieved passage to cite in the prompt, best-ranked first.
#[derive(Debug, Clone, Default)]
pub struct ContextBlock {
    pub title: String,
    pub source: String,
}

#[derive(Debug, Clone)]
pub struct RenderedPrompt {
    pub text: String,
    /// Lowest-ranked neighbors dropped to fit the token budget.
    pub dropped_neighbors: usize,
    pub token_count: usize,
}

/// Renders system turn, neighbor blocks in rank order, the wrapped
/// question, and the assistant cue. Neighbors are dropped from the lowest
/// rank up until the prompt fits in `max_prompt_tokens`.
pub fn format_rag_prompt(
    question: &str,
    neighbors: &[ContextBlock],
    template: &PromptTemplate,
    vocab: &Vocabulary,
    max_prompt_tokens: usize,
) -> RenderedPrompt {
    let mut keep = neighbors.len();
    loop {
        let text = render(question, &neighbors[..keep], template);
        let token_count = vocab.tokenize(&text).len();
        if token_count <= max_prompt_tokens || keep == 0 {
            return RenderedPrompt {
                text,
                dropped_neighbors: neighbors.len() - keep,
                token_count,
            };
        }
        keep -= 1;
    }
}

/// The user-turn text: context blocks in rank order, then the wrapped
/// question. Shared by prompt rendering and conversational data builders.
pub fn render_user_turn(
    question: &str,
    neighbors: &[ContextBlock],
    template: &PromptTemplate,
) -> String {
    let mut user = String::new();
    for block in neighbors {
        let rendered = template
            .context_format
            .replace("{title}", &block.title)
            .replace("{source}", &block.source);
        user.push_str(&rendered);
        user.push('\n');
    }
    if !user.is_empty() {
        user.push('\n');
    }
    user.push_str(&template.question_wrapper.replace("{question}", question));
    user
}

fn render(question: &str, neighbors: &[ContextBlock], template: &PromptTemplate) -> String {
    let user = render_user_turn(question, neighbors, template);
    format!(
        "System: {}\n\nUser: {}\n\nAssistant: {}",
        template.system_preamble, user, template.assistant_cue
    )
}

/// Answer span for scoring: everything after the assistant cue when the cue
/// is echoed, otherwise the whole (already truncated) generation.
pub fn extract_answer(generation: &str, template: &PromptTemplate) -> String {
    match generation.find(&template.assistant_cue) {
        Some(p) => generation[p + template.assistant_cue.len()..].trim().to_string(),
        None => generation.trim().to_string(),
    }
}
