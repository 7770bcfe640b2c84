#![allow(dead_code)]

use std::sync::Arc;

use chrono::NaiveDate;
use litmine::gateway::{Gateway, MockBackend, MockEmbedder, ScriptedResponder, TaskKind};
use litmine::registry::PublicationCitation;

pub fn date(y: i32, m: u32, d: u32) -> NaiveDate {
    NaiveDate::from_ymd_opt(y, m, d).unwrap()
}

pub fn citation(id: &str, title: &str, abstract_text: &str, published: NaiveDate) -> PublicationCitation {
    PublicationCitation {
        citation_id: id.to_string(),
        title: title.to_string(),
        abstract_text: abstract_text.to_string(),
        publication_date: published,
        linked_trial_id: None,
        full_text: None,
        table_text: None,
    }
}

/// Gateway whose chat replies come from `(task, subject, reply)` triples.
pub fn scripted(entries: &[(TaskKind, &str, &str)]) -> (Gateway, MockBackend) {
    let mut responder = ScriptedResponder::new();
    for (task, subject, reply) in entries {
        responder.insert(*task, *subject, *reply);
    }
    let backend = MockBackend::new(Arc::new(responder));
    (Gateway::mock(backend.clone()), backend)
}

pub fn scripted_with_embedder(entries: &[(TaskKind, &str, &str)], embedder: MockEmbedder) -> Gateway {
    let mut responder = ScriptedResponder::new();
    for (task, subject, reply) in entries {
        responder.insert(*task, *subject, *reply);
    }
    Gateway::mock(MockBackend::new(Arc::new(responder)).with_embedder(embedder))
}

/// Gateway that answers every chat call from a closure.
pub fn responding<F>(f: F) -> (Gateway, MockBackend)
where
    F: Fn(&litmine::gateway::ChatRequest) -> String + Send + Sync + 'static,
{
    let backend = MockBackend::from_fn(f);
    (Gateway::mock(backend.clone()), backend)
}
pub mod workbench;
