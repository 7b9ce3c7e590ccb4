use std::sync::Arc;

use serde_json::json;

use super::{Backend, BackendRequest, Role};
use crate::reward::{Judge, JudgeError, JudgeVerdict};

/// Judge served by a model over the wire protocol. The reply text must be a
/// JSON `JudgeVerdict`.
pub struct RemoteJudge {
    backend: Arc<dyn Backend>,
}

impl RemoteJudge {
    pub fn new(backend: Arc<dyn Backend>) -> Self {
        Self { backend }
    }

    fn prompt(diagnoses: &[String], exams: &[String], truth: &str) -> String {
        format!(
            "Ground truth: {truth}\nProposed diagnoses (ranked): {}\nRequested examinations: {}\n\
             Reply with JSON {{\"match_position\": <1-based index or null>, \
             \"exam_quality\": \"differentiates\"|\"neutral\"|\"problematic\", \"hacking\": <bool>}}.",
            diagnoses.join("; "),
            exams.join("; ")
        )
    }
}

impl Judge for RemoteJudge {
    fn judge(
        &self,
        diagnoses: &[String],
        exams: &[String],
        truth: &str,
    ) -> Result<JudgeVerdict, JudgeError> {
        let request = BackendRequest {
            role: Role::Judge,
            mode: None,
            prompt: Self::prompt(diagnoses, exams, truth),
            images: Vec::new(),
            references: Vec::new(),
            metadata: json!({"diagnoses": diagnoses, "exams": exams, "truth": truth}),
        };
        let reply = self
            .backend
            .call(&request)
            .map_err(|e| JudgeError::Remote(e.to_string()))?;
        let verdict: JudgeVerdict = serde_json::from_str(reply.text.trim())
            .map_err(|e| JudgeError::Reply(e.to_string()))?;
        match verdict.match_position {
            Some(i) if i == 0 || i > diagnoses.len() => Err(JudgeError::Reply(format!(
                "match position {i} outside 1..={}",
                diagnoses.len()
            ))),
            _ => Ok(verdict),
        }
    }
}
