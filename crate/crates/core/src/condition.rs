use std::fmt;

/// What the denoiser is asked to generate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Concept {
    Null,
    Class(usize),
    Subject,
}

/// Which affine context the sample should appear in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Context {
    Plain,
    Ctx(usize),
}

impl Context {
    /// 0 for `Plain`, `j + 1` for `Ctx(j)`.
    pub fn index(self) -> usize {
        match self {
            Context::Plain => 0,
            Context::Ctx(j) => j + 1,
        }
    }

    pub fn from_index(i: usize) -> Self {
        if i == 0 {
            Context::Plain
        } else {
            Context::Ctx(i - 1)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Condition {
    pub concept: Concept,
    pub context: Context,
}

impl Condition {
    pub fn new(concept: Concept, context: Context) -> Self {
        Self { concept, context }
    }

    pub fn subject(context: Context) -> Self {
        Self::new(Concept::Subject, context)
    }

    pub fn class(k: usize, context: Context) -> Self {
        Self::new(Concept::Class(k), context)
    }

    pub fn null(context: Context) -> Self {
        Self::new(Concept::Null, context)
    }
}

impl fmt::Display for Concept {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Concept::Null => f.write_str("null"),
            Concept::Class(k) => write!(f, "class{k}"),
            Concept::Subject => f.write_str("subject"),
        }
    }
}

impl fmt::Display for Context {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Context::Plain => f.write_str("plain"),
            Context::Ctx(j) => write!(f, "ctx{j}"),
        }
    }
}

impl std::str::FromStr for Context {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        if s == "plain" {
            return Ok(Context::Plain);
        }
        s.strip_prefix("ctx")
            .and_then(|j| j.parse().ok())
            .map(Context::Ctx)
            .ok_or_else(|| crate::Error::Config(format!("unknown context `{s}` (plain|ctxN)")))
    }
}
