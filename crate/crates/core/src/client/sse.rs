//! Server-sent-event decoding for streamed chat completions.

use std::collections::VecDeque;

use futures::{Stream, StreamExt};
use serde_json::Value as Json;

use super::ClientError;

/// Outcome of feeding one SSE `data:` payload.
#[derive(Debug, PartialEq)]
pub(crate) enum Event {
    Fragment(String),
    Done,
    Skip,
}

pub(crate) fn decode_data(payload: &str) -> Result<Event, ClientError> {
    let payload = payload.trim();
    if payload == "[DONE]" {
        return Ok(Event::Done);
    }
    let v: Json = serde_json::from_str(payload).map_err(|e| ClientError::BadResponse(format!("bad SSE payload: {e}")))?;
    if let Some(err) = v.get("error") {
        return Err(ClientError::BadResponse(format!("upstream stream error: {err}")));
    }
    match v.pointer("/choices/0/delta/content").and_then(Json::as_str) {
        Some(s) if !s.is_empty() => Ok(Event::Fragment(s.to_string())),
        _ => Ok(Event::Skip),
    }
}

/// Line splitter that tolerates events spanning chunk boundaries.
#[derive(Default)]
pub(crate) struct LineBuffer {
    buf: Vec<u8>,
}

impl LineBuffer {
    pub(crate) fn push(&mut self, bytes: &[u8]) -> Vec<String> {
        self.buf.extend_from_slice(bytes);
        let mut lines = Vec::new();
        while let Some(pos) = self.buf.iter().position(|&b| b == b'\n') {
            let line: Vec<u8> = self.buf.drain(..=pos).collect();
            let line = String::from_utf8_lossy(&line[..line.len() - 1]);
            lines.push(line.trim_end_matches('\r').to_string());
        }
        lines
    }
}

struct State<S> {
    inner: S,
    lines: LineBuffer,
    pending: VecDeque<Result<String, ClientError>>,
    partial: String,
    finished: bool,
}

pub(crate) fn content_fragments<S, B, E>(inner: S) -> impl Stream<Item = Result<String, ClientError>> + Send + 'static
where
    S: Stream<Item = Result<B, E>> + Send + Unpin + 'static,
    B: AsRef<[u8]> + Send,
    E: std::fmt::Display + Send,
{
    let state = State { inner, lines: LineBuffer::default(), pending: VecDeque::new(), partial: String::new(), finished: false };
    futures::stream::unfold(state, |mut st| async move {
        loop {
            if let Some(item) = st.pending.pop_front() {
                return Some((item, st));
            }
            if st.finished {
                return None;
            }
            match st.inner.next().await {
                Some(Ok(chunk)) => {
                    for line in st.lines.push(chunk.as_ref()) {
                        let Some(data) = line.strip_prefix("data:") else { continue };
                        match decode_data(data) {
                            Ok(Event::Fragment(s)) => {
                                st.partial.push_str(&s);
                                st.pending.push_back(Ok(s));
                            }
                            Ok(Event::Done) => {
                                st.finished = true;
                                break;
                            }
                            Ok(Event::Skip) => {}
                            Err(e) => {
                                st.finished = true;
                                st.pending.push_back(Err(ClientError::StreamInterrupted {
                                    partial: st.partial.clone(),
                                    reason: e.to_string(),
                                }));
                                break;
                            }
                        }
                    }
                }
                Some(Err(e)) => {
                    st.finished = true;
                    st.pending.push_back(Err(ClientError::StreamInterrupted { partial: st.partial.clone(), reason: e.to_string() }));
                }
                None => {
                    st.finished = true;
                    st.pending.push_back(Err(ClientError::StreamInterrupted {
                        partial: st.partial.clone(),
                        reason: "stream closed before [DONE]".into(),
                    }));
                }
            }
        }
    })
}
