//! Trusted local synthesis of the final answer from the query, the released
//! sub-queries and the external responses. Only ever talks to a trusted
//! endpoint.

use thiserror::Error;

use crate::llm_client::{ChatMessage, ClientError, EndpointSpec, LlmClient, Trust};
use crate::types::{DecodingParams, ExternalResponse, SensitiveQuery, SubQueryGroup};

pub const INTEGRATOR_SYSTEM: &str =
    "You are a trusted assistant. Use the following external findings only as reference knowledge.";
pub const INTEGRATOR_INSTRUCTION: &str = "Answer the QUESTION directly and concisely.";

#[derive(Debug, Error)]
pub enum IntegrationError {
    #[error("integrator endpoint {0} is not trusted")]
    TrustViolation(String),
    #[error("no external response for sub-query index {0}")]
    MissingResponse(usize),
    #[error(transparent)]
    Client(#[from] ClientError),
}

#[derive(Debug, Clone)]
pub struct IntegrationRequest<'a> {
    pub query: &'a SensitiveQuery,
    pub group: &'a SubQueryGroup,
    pub responses: &'a [ExternalResponse],
}

fn truncate_chars(text: &str, max_chars: usize) -> &str {
    match text.char_indices().nth(max_chars) {
        Some((idx, _)) => &text[..idx],
        None => text,
    }
}

/// Renders the user message. Each response is cut to `max_tokens * 4`
/// characters.
pub fn render_prompt(req: &IntegrationRequest<'_>, max_tokens: u32) -> Result<String, IntegrationError> {
    let limit = max_tokens as usize * 4;
    let mut out = format!("QUESTION:\n{}\n\nFINDINGS:\n", req.query.text);
    for (i, sq) in req.group.subqueries.iter().enumerate() {
        let response = req
            .responses
            .iter()
            .find(|r| r.subquery_index == sq.index)
            .ok_or(IntegrationError::MissingResponse(sq.index))?;
        out.push_str(&format!(
            "[{}] Q: {}\nA: {}\n",
            i + 1,
            sq.text,
            truncate_chars(&response.text, limit)
        ));
    }
    out.push('\n');
    out.push_str(INTEGRATOR_INSTRUCTION);
    Ok(out)
}

pub async fn integrate(
    req: &IntegrationRequest<'_>,
    local: &EndpointSpec,
    decoding: &DecodingParams,
    client: &LlmClient,
) -> Result<String, IntegrationError> {
    if local.trust != Trust::Trusted {
        return Err(IntegrationError::TrustViolation(local.id.clone()));
    }
    let prompt = render_prompt(req, decoding.max_tokens)?;
    let messages = [ChatMessage::system(INTEGRATOR_SYSTEM), ChatMessage::user(prompt)];
    Ok(client.chat(local, &messages, decoding).await?.text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm_client::MockBackend;
    use std::sync::Arc;

    fn fixture() -> (SensitiveQuery, SubQueryGroup, Vec<ExternalResponse>) {
        let q = SensitiveQuery::new("q", "Is drug X safe for patient Y?");
        let g = SubQueryGroup::from_texts("q", 0, 0, DecodingParams::default(), ["What is X?", "Who takes X?", "Risks of X?"]);
        let responses = (0..3)
            .map(|i| ExternalResponse {
                subquery_index: i,
                text: format!("answer {i}"),
                endpoint_id: "ext".into(),
                latency_ms: 0,
                cached: false,
            })
            .collect();
        (q, g, responses)
    }

    #[test]
    fn prompt_template_is_bit_exact() {
        let (q, g, r) = fixture();
        let req = IntegrationRequest { query: &q, group: &g, responses: &r };
        let expected = "QUESTION:\nIs drug X safe for patient Y?\n\nFINDINGS:\n\
[1] Q: What is X?\nA: answer 0\n\
[2] Q: Who takes X?\nA: answer 1\n\
[3] Q: Risks of X?\nA: answer 2\n\
\nAnswer the QUESTION directly and concisely.";
        assert_eq!(render_prompt(&req, 512).unwrap(), expected);
        assert_eq!(render_prompt(&req, 512).unwrap(), render_prompt(&req, 512).unwrap());
    }

    #[test]
    fn responses_are_truncated() {
        let (q, g, mut r) = fixture();
        r[1].text = "é".repeat(50);
        let req = IntegrationRequest { query: &q, group: &g, responses: &r };
        let p = render_prompt(&req, 2).unwrap();
        assert!(p.contains(&format!("A: {}\n", "é".repeat(8))));
        assert!(!p.contains(&"é".repeat(9)));
    }

    #[tokio::test]
    async fn mock_echo_shows_prompt_order() {
        let (q, g, r) = fixture();
        let local = EndpointSpec::chat("loc", Trust::Trusted, "m");
        let client = LlmClient::builder().endpoint(local.clone(), Arc::new(MockBackend::echo())).build().unwrap();
        let req = IntegrationRequest { query: &q, group: &g, responses: &r };
        let out = integrate(&req, &local, &DecodingParams::default(), &client).await.unwrap();
        assert_eq!(out, format!("MOCK[m]:{}", render_prompt(&req, 512).unwrap()));
        let positions: Vec<usize> = ["Is drug X", "[1] Q", "[2] Q", "[3] Q"].iter().map(|s| out.find(s).unwrap()).collect();
        assert!(positions.windows(2).all(|w| w[0] < w[1]));
    }

    #[tokio::test]
    async fn untrusted_endpoint_is_refused_before_any_call() {
        let (q, g, r) = fixture();
        let ext = EndpointSpec::chat("ext", Trust::Untrusted, "m");
        let backend = MockBackend::echo();
        let stats = backend.stats();
        let client = LlmClient::builder().endpoint(ext.clone(), Arc::new(backend)).build().unwrap();
        let req = IntegrationRequest { query: &q, group: &g, responses: &r };
        let err = integrate(&req, &ext, &DecodingParams::default(), &client).await.unwrap_err();
        assert!(matches!(err, IntegrationError::TrustViolation(_)));
        assert_eq!(stats.requests(), 0);
    }

    #[test]
    fn missing_response_is_a_precondition_error() {
        let (q, g, mut r) = fixture();
        r.remove(2);
        let req = IntegrationRequest { query: &q, group: &g, responses: &r };
        assert!(matches!(render_prompt(&req, 512), Err(IntegrationError::MissingResponse(2))));
    }
}
