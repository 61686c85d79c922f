//! Scripted in-process backend used as the test oracle.

use std::collections::{HashMap, VecDeque};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use super::{BackendReply, ChatBackend, ChatRequest, GatewayError, RequestMeta, Role};

pub struct MockRequest<'a> {
    pub request: &'a ChatRequest,
    pub meta: &'a RequestMeta,
}

impl MockRequest<'_> {
    /// Content of the final user message.
    pub fn last_user(&self) -> &str {
        self.request
            .messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .map(|m| m.content.as_str())
            .unwrap_or("")
    }
}

type Responder = Box<dyn Fn(&MockRequest<'_>) -> Result<String, GatewayError> + Send + Sync>;

/// Counts every call it receives.
pub struct MockBackend {
    responder: Responder,
    calls: AtomicUsize,
}

impl MockBackend {
    pub fn new<F>(responder: F) -> Self
    where
        F: Fn(&MockRequest<'_>) -> Result<String, GatewayError> + Send + Sync + 'static,
    {
        Self {
            responder: Box::new(responder),
            calls: AtomicUsize::new(0),
        }
    }

    /// Replies in order; once exhausted, every call is a transport error.
    pub fn scripted(replies: Vec<Result<String, GatewayError>>) -> Self {
        let queue = Mutex::new(VecDeque::from(replies));
        Self::new(move |_| {
            queue
                .lock()
                .unwrap()
                .pop_front()
                .unwrap_or_else(|| Err(GatewayError::Transport("mock script exhausted".into())))
        })
    }

    /// Looks the response up by the request's sentence id.
    pub fn by_sentence<I>(responses: I) -> Self
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let map: HashMap<String, String> = responses.into_iter().collect();
        Self::new(move |req| {
            let id = req.meta.sentence_id.as_deref().unwrap_or_default();
            map.get(id).cloned().ok_or_else(|| GatewayError::Api {
                status: 404,
                body: format!("no scripted response for sentence {id:?}"),
            })
        })
    }

    /// Fixture file: a JSON object mapping sentence id to response text.
    pub fn from_fixture(path: &Path) -> Result<Self, GatewayError> {
        let bytes = std::fs::read(path).map_err(|e| GatewayError::Transport(format!("{}: {e}", path.display())))?;
        let map: HashMap<String, String> = serde_json::from_slice(&bytes)
            .map_err(|e| GatewayError::MalformedResponse(format!("{}: {e}", path.display())))?;
        Ok(Self::by_sentence(map))
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl ChatBackend for MockBackend {
    fn send(
        &self,
        request: &ChatRequest,
        _timeout: Duration,
        meta: &RequestMeta,
    ) -> Result<BackendReply, GatewayError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let text = (self.responder)(&MockRequest { request, meta })?;
        Ok(BackendReply { text, usage: None })
    }
}
