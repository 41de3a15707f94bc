//! Incremental decoder for `text/event-stream` bodies.
//!
//! Only `data:` fields matter for chat completions; events are dispatched on
//! the blank line that terminates them. Bytes are buffered until a full line
//! is available so multi-byte characters split across chunks decode
//! correctly.

#[derive(Debug, Default)]
pub struct SseDecoder {
    pending: Vec<u8>,
    data: Vec<String>,
}

impl SseDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Feed a chunk; returns the data payloads of every event completed by it.
    pub fn push(&mut self, chunk: &[u8]) -> Vec<String> {
        self.pending.extend_from_slice(chunk);
        let mut events = Vec::new();
        while let Some(pos) = self.pending.iter().position(|&b| b == b'\n') {
            let line: Vec<u8> = self.pending.drain(..=pos).collect();
            let line = String::from_utf8_lossy(&line);
            let line = line.trim_end_matches(['\n', '\r']);
            self.process_line(line, &mut events);
        }
        events
    }

    /// Flush a final event that was not followed by a blank line.
    pub fn finish(&mut self) -> Vec<String> {
        let mut events = Vec::new();
        if !self.pending.is_empty() {
            let rest = std::mem::take(&mut self.pending);
            let line = String::from_utf8_lossy(&rest);
            self.process_line(line.trim_end_matches(['\n', '\r']), &mut events);
        }
        if !self.data.is_empty() {
            events.push(self.data.drain(..).collect::<Vec<_>>().join("\n"));
        }
        events
    }

    fn process_line(&mut self, line: &str, events: &mut Vec<String>) {
        if line.is_empty() {
            if !self.data.is_empty() {
                events.push(self.data.drain(..).collect::<Vec<_>>().join("\n"));
            }
            return;
        }
        if line.starts_with(':') {
            return;
        }
        let (field, value) = match line.split_once(':') {
            Some((f, v)) => (f, v.strip_prefix(' ').unwrap_or(v)),
            None => (line, ""),
        };
        if field == "data" {
            self.data.push(value.to_string());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn dispatches_on_blank_line() {
        let mut d = SseDecoder::new();
        assert!(d.push(b"data: a").is_empty());
        assert!(d.push(b"bc\n").is_empty());
        assert_eq!(d.push(b"\ndata: [DONE]\n\n"), vec!["abc", "[DONE]"]);
    }

    #[test]
    fn ignores_comments_and_other_fields() {
        let mut d = SseDecoder::new();
        let out = d.push(b": keep-alive\nevent: message\nid: 3\ndata:x\r\n\r\n");
        assert_eq!(out, vec!["x"]);
    }

    #[test]
    fn multi_line_data_joins_with_newline() {
        let mut d = SseDecoder::new();
        assert_eq!(d.push(b"data: 1\ndata: 2\n\n"), vec!["1\n2"]);
    }

    #[test]
    fn finish_flushes_unterminated_event() {
        let mut d = SseDecoder::new();
        assert!(d.push(b"data: tail").is_empty());
        assert_eq!(d.finish(), vec!["tail"]);
    }

    proptest! {
        #[test]
        fn chunking_does_not_change_events(
            payloads in proptest::collection::vec("[a-zé\u{1F331} ]{1,10}", 1..6),
            cut in 1usize..7,
        ) {
            let body: String = payloads.iter().map(|p| format!("data: {p}\n\n")).collect();
            let bytes = body.as_bytes();
            let mut d = SseDecoder::new();
            let mut events = Vec::new();
            for chunk in bytes.chunks(cut) {
                events.extend(d.push(chunk));
            }
            events.extend(d.finish());
            prop_assert_eq!(events, payloads);
        }
    }
}
