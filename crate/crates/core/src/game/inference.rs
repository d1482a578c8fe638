//! Single-group inference path: generate, dispatch, integrate.

use serde::{Deserialize, Serialize};

use super::round::{sample_group, GameContext};
use super::GameError;
use crate::integrator::{integrate, IntegrationRequest};
use crate::llm_client::OutboundGuard;
use crate::types::{ExternalResponse, SensitiveQuery};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Inference {
    pub query_id: String,
    pub subqueries: Vec<String>,
    pub responses: Vec<ExternalResponse>,
    pub answer: String,
}

pub async fn ask(ctx: &GameContext, query: &SensitiveQuery) -> Result<Inference, GameError> {
    if !query.is_valid() {
        return Err(GameError::InvalidConfig("query text is empty".into()));
    }
    let group = sample_group(ctx, query, 0, 0).await?;
    let guard = OutboundGuard::for_query(&query.text);
    let responses = ctx
        .client
        .dispatch_group(&ctx.endpoints.external, &group, &ctx.decoding, &guard)
        .await?;
    let request = IntegrationRequest {
        query,
        group: &group,
        responses: &responses,
    };
    let answer = integrate(&request, &ctx.endpoints.integrator, &ctx.decoding, &ctx.client).await?;
    Ok(Inference {
        query_id: query.id.clone(),
        subqueries: group.texts().map(str::to_owned).collect(),
        responses,
        answer,
    })
}
