//! Outbound privacy guard.
//!
//! Structural check only: a payload bound for an untrusted endpoint must not
//! contain any forbidden string once both sides are lowercased and runs of
//! whitespace are collapsed to one space.

/// Lowercases and collapses every whitespace run to a single space, trimming
/// both ends.
pub fn normalize(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for word in text.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        out.extend(word.chars().flat_map(char::to_lowercase));
    }
    out
}

/// True iff no forbidden string occurs in `payload` after normalization.
pub fn guard_outbound<S: AsRef<str>>(payload: &str, forbidden: &[S]) -> bool {
    let payload = normalize(payload);
    forbidden.iter().all(|f| {
        let f = normalize(f.as_ref());
        f.is_empty() || !payload.contains(&f)
    })
}

/// Normalized forbidden strings for one call site.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct OutboundGuard {
    forbidden: Vec<String>,
}

impl OutboundGuard {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Guard that forbids the original query text.
    pub fn for_query(query: &str) -> Self {
        Self::empty().forbid(query)
    }

    pub fn forbid(mut self, secret: &str) -> Self {
        let n = normalize(secret);
        if !n.is_empty() && !self.forbidden.contains(&n) {
            self.forbidden.push(n);
        }
        self
    }

    pub fn extend<I, S>(mut self, secrets: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        for s in secrets {
            self = self.forbid(s.as_ref());
        }
        self
    }

    pub fn forbidden(&self) -> &[String] {
        &self.forbidden
    }

    pub fn allows(&self, payload: &str) -> bool {
        let payload = normalize(payload);
        self.forbidden.iter().all(|f| !payload.contains(f.as_str()))
    }
}
