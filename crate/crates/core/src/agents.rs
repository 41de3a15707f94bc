//! Agent personas and effective-prompt composition.
//!
//! A persona is defined by data (see `data/personas.toml`): an id, a display
//! name, a color tag, a routing description and a base system prompt. At
//! session start each base prompt has its template placeholders resolved and
//! the serialized gardener profile appended.

use std::borrow::Borrow;
use std::collections::HashSet;
use std::fmt;
use std::ops::Deref;
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::profile::{serialize_profile, UserProfile};

const BUILTIN_PERSONAS: &str = include_str!("../data/personas.toml");

/// Placeholder resolved to the session date, e.g. "April 15, 2025".
pub const CURRENT_DATE: &str = "current_date";
pub const SUPPORTED_PLACEHOLDERS: &[&str] = &[CURRENT_DATE];

/// Inserted between the resolved base prompt and the profile block.
pub const PROFILE_SEPARATOR: &str = "\n\n--- Gardener profile ---\n";

/// Speaker token reserved for the human side of the transcript.
pub const USER_SPEAKER: &str = "user";

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AgentId(String);

impl AgentId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl Deref for AgentId {
    type Target = str;

    fn deref(&self) -> &str {
        &self.0
    }
}

impl Borrow<str> for AgentId {
    fn borrow(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for AgentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for AgentId {
    fn from(s: &str) -> Self {
        Self(s.to_string())
    }
}

impl PartialEq<str> for AgentId {
    fn eq(&self, other: &str) -> bool {
        self.0 == other
    }
}

impl PartialEq<&str> for AgentId {
    fn eq(&self, other: &&str) -> bool {
        self.0 == *other
    }
}

/// Message tint in the chat client. The first three are the built-in persona
/// colors; the rest form the fixed palette for plug-in personas.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColorTag {
    Green,
    Blue,
    Orange,
    Purple,
    Teal,
    Red,
    Pink,
    Brown,
    Gray,
}

impl ColorTag {
    pub const ALL: [ColorTag; 9] = [
        ColorTag::Green,
        ColorTag::Blue,
        ColorTag::Orange,
        ColorTag::Purple,
        ColorTag::Teal,
        ColorTag::Red,
        ColorTag::Pink,
        ColorTag::Brown,
        ColorTag::Gray,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ColorTag::Green => "green",
            ColorTag::Blue => "blue",
            ColorTag::Orange => "orange",
            ColorTag::Purple => "purple",
            ColorTag::Teal => "teal",
            ColorTag::Red => "red",
            ColorTag::Pink => "pink",
            ColorTag::Brown => "brown",
            ColorTag::Gray => "gray",
        }
    }

    /// Default hex value for the tag in the web client.
    pub fn hex(self) -> &'static str {
        match self {
            ColorTag::Green => "#2e7d32",
            ColorTag::Blue => "#1565c0",
            ColorTag::Orange => "#ef6c00",
            ColorTag::Purple => "#6a1b9a",
            ColorTag::Teal => "#00838f",
            ColorTag::Red => "#c62828",
            ColorTag::Pink => "#ad1457",
            ColorTag::Brown => "#5d4037",
            ColorTag::Gray => "#546e7a",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        ColorTag::ALL.into_iter().find(|c| c.name() == s.trim())
    }
}

impl fmt::Display for ColorTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TemplateError {
    #[error("unknown placeholder `{0}`")]
    UnknownPlaceholder(String),
    #[error("unterminated placeholder starting at byte {0}")]
    Unterminated(usize),
}

impl TemplateError {
    pub fn placeholder(&self) -> Option<&str> {
        match self {
            TemplateError::UnknownPlaceholder(name) => Some(name),
            TemplateError::Unterminated(_) => None,
        }
    }
}

enum Piece<'a> {
    Text(&'a str),
    Placeholder(&'a str),
}

/// Split text into literal runs and `{{name}}` placeholders.
fn scan_template(text: &str) -> Result<Vec<Piece<'_>>, TemplateError> {
    let mut pieces = Vec::new();
    let mut rest = text;
    let mut offset = 0;
    while let Some(start) = rest.find("{{") {
        let Some(len) = rest[start + 2..].find("}}") else {
            return Err(TemplateError::Unterminated(offset + start));
        };
        if start > 0 {
            pieces.push(Piece::Text(&rest[..start]));
        }
        pieces.push(Piece::Placeholder(rest[start + 2..start + 2 + len].trim()));
        let consumed = start + 2 + len + 2;
        offset += consumed;
        rest = &rest[consumed..];
    }
    if !rest.is_empty() {
        pieces.push(Piece::Text(rest));
    }
    Ok(pieces)
}

/// Names of all placeholders in `text`, in order of appearance.
pub fn placeholders(text: &str) -> Result<Vec<String>, TemplateError> {
    Ok(scan_template(text)?
        .into_iter()
        .filter_map(|p| match p {
            Piece::Placeholder(name) => Some(name.to_string()),
            Piece::Text(_) => None,
        })
        .collect())
}

pub fn format_long_date(date: NaiveDate) -> String {
    date.format("%B %-d, %Y").to_string()
}

/// Substitute every supported placeholder in `text`.
pub fn resolve_text(text: &str, date: NaiveDate) -> Result<String, TemplateError> {
    let mut out = String::with_capacity(text.len() + 16);
    for piece in scan_template(text)? {
        match piece {
            Piece::Text(t) => out.push_str(t),
            Piece::Placeholder(CURRENT_DATE) => out.push_str(&format_long_date(date)),
            Piece::Placeholder(other) => {
                return Err(TemplateError::UnknownPlaceholder(other.to_string()))
            }
        }
    }
    Ok(out)
}

/// One problem found while validating a persona definition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PersonaDiagnostic {
    /// `persona[2] (id "ecobot")`, or `file` for whole-document problems.
    pub location: String,
    pub field: String,
    pub message: String,
}

impl fmt::Display for PersonaDiagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}: {}", self.location, self.field, self.message)
    }
}

#[derive(Debug, Error)]
pub enum PersonaError {
    #[error("cannot read persona file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("persona file parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid persona definitions:\n{}", .0.iter().map(|d| format!("  {d}")).collect::<Vec<_>>().join("\n"))]
    Invalid(Vec<PersonaDiagnostic>),
}

impl PersonaError {
    pub fn diagnostics(&self) -> &[PersonaDiagnostic] {
        match self {
            PersonaError::Invalid(d) => d,
            _ => &[],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentSpec {
    id: AgentId,
    display_name: String,
    color: ColorTag,
    description: String,
    base_prompt: String,
}

impl AgentSpec {
    pub fn new(
        id: &str,
        display_name: &str,
        color: ColorTag,
        description: &str,
        base_prompt: &str,
    ) -> Result<Self, PersonaError> {
        let raw = RawPersona {
            id: Some(id.to_string()),
            display_name: Some(display_name.to_string()),
            color: Some(color.name().to_string()),
            description: Some(description.to_string()),
            base_prompt: Some(base_prompt.to_string()),
        };
        let mut diagnostics = Vec::new();
        match raw.validate(&format!("persona \"{id}\""), &mut diagnostics) {
            Some(spec) => Ok(spec),
            None => Err(PersonaError::Invalid(diagnostics)),
        }
    }

    pub fn id(&self) -> &AgentId {
        &self.id
    }

    pub fn display_name(&self) -> &str {
        &self.display_name
    }

    pub fn color(&self) -> ColorTag {
        self.color
    }

    pub fn description(&self) -> &str {
        &self.description
    }

    pub fn base_prompt(&self) -> &str {
        &self.base_prompt
    }
}

/// Resolve the template variables of a persona's base prompt.
pub fn resolve_template(spec: &AgentSpec, date: NaiveDate) -> Result<String, TemplateError> {
    resolve_text(&spec.base_prompt, date)
}

/// The resolved base prompt followed by [`PROFILE_SEPARATOR`] and the
/// serialized profile.
pub fn effective_prompt(
    spec: &AgentSpec,
    profile: &UserProfile,
    date: NaiveDate,
) -> Result<String, TemplateError> {
    let mut prompt = resolve_template(spec, date)?;
    prompt.push_str(PROFILE_SEPARATOR);
    prompt.push_str(&serialize_profile(profile));
    Ok(prompt)
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AgentSetError {
    #[error("an agent set needs at least 2 agents, got {0}")]
    TooFew(usize),
    #[error("duplicate agent id `{0}`")]
    DuplicateId(String),
}

/// Ordered, immutable collection of personas with unique ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<AgentSpec>", into = "Vec<AgentSpec>")]
pub struct AgentSet {
    agents: Vec<AgentSpec>,
}

impl TryFrom<Vec<AgentSpec>> for AgentSet {
    type Error = AgentSetError;

    fn try_from(agents: Vec<AgentSpec>) -> Result<Self, Self::Error> {
        AgentSet::new(agents)
    }
}

impl From<AgentSet> for Vec<AgentSpec> {
    fn from(set: AgentSet) -> Self {
        set.agents
    }
}

impl AgentSet {
    pub fn new(agents: Vec<AgentSpec>) -> Result<Self, AgentSetError> {
        if agents.len() < 2 {
            return Err(AgentSetError::TooFew(agents.len()));
        }
        if let Some(dup) = first_duplicate(agents.iter().map(|a| a.id.as_str())) {
            return Err(AgentSetError::DuplicateId(dup));
        }
        Ok(Self { agents })
    }

    /// The three shipped gardening personas.
    pub fn builtin() -> Self {
        let specs = parse_personas(BUILTIN_PERSONAS).expect("shipped personas must validate");
        AgentSet::new(specs).expect("shipped personas form a valid set")
    }

    /// A new set with `extra` appended. Fails without modifying anything when
    /// any id collides.
    pub fn extend(&self, extra: Vec<AgentSpec>) -> Result<Self, AgentSetError> {
        let mut agents = self.agents.clone();
        agents.extend(extra);
        AgentSet::new(agents)
    }

    pub fn get(&self, id: &str) -> Option<&AgentSpec> {
        self.agents.iter().find(|a| a.id.as_str() == id)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.get(id).is_some()
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.agents.iter().position(|a| a.id.as_str() == id)
    }

    pub fn ids(&self) -> Vec<AgentId> {
        self.agents.iter().map(|a| a.id.clone()).collect()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, AgentSpec> {
        self.agents.iter()
    }

    pub fn len(&self) -> usize {
        self.agents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.agents.is_empty()
    }

    pub fn display_name(&self, id: &str) -> String {
        self.get(id)
            .map(|a| a.display_name.clone())
            .unwrap_or_else(|| id.to_string())
    }
}

impl<'a> IntoIterator for &'a AgentSet {
    type Item = &'a AgentSpec;
    type IntoIter = std::slice::Iter<'a, AgentSpec>;

    fn into_iter(self) -> Self::IntoIter {
        self.agents.iter()
    }
}

/// Ids compare case-insensitively because selector replies are matched that
/// way.
fn first_duplicate<'a>(ids: impl Iterator<Item = &'a str>) -> Option<String> {
    let mut seen = HashSet::new();
    for id in ids {
        if !seen.insert(id.to_ascii_lowercase()) {
            return Some(id.to_string());
        }
    }
    None
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct PersonaFile {
    #[serde(default)]
    #[allow(dead_code)]
    version: Option<u32>,
    #[serde(default)]
    persona: Vec<RawPersona>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPersona {
    id: Option<String>,
    display_name: Option<String>,
    color: Option<String>,
    description: Option<String>,
    base_prompt: Option<String>,
}

impl RawPersona {
    fn validate(self, location: &str, out: &mut Vec<PersonaDiagnostic>) -> Option<AgentSpec> {
        let before = out.len();
        let mut diag = |field: &str, message: String| {
            out.push(PersonaDiagnostic {
                location: location.to_string(),
                field: field.to_string(),
                message,
            })
        };

        let id = self.id.unwrap_or_default().trim().to_string();
        if id.is_empty() {
            diag("id", "missing or empty".into());
        } else if id.chars().any(char::is_whitespace) {
            diag("id", format!("`{id}` contains whitespace"));
        } else if !id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
        {
            diag("id", format!("`{id}` may only contain letters, digits, `-` and `_`"));
        } else if id.eq_ignore_ascii_case(USER_SPEAKER) {
            diag("id", format!("`{id}` is reserved"));
        }

        let display_name = self.display_name.unwrap_or_default().trim().to_string();
        if display_name.is_empty() {
            diag("display_name", "missing or empty".into());
        }

        let color = match self.color.as_deref().map(str::trim) {
            None | Some("") => {
                diag("color", "missing or empty".into());
                None
            }
            Some(c) => {
                let parsed = ColorTag::parse(c);
                if parsed.is_none() {
                    let palette: Vec<_> = ColorTag::ALL.iter().map(|c| c.name()).collect();
                    diag(
                        "color",
                        format!("`{c}` is not in the palette ({})", palette.join(", ")),
                    );
                }
                parsed
            }
        };

        let description = self.description.unwrap_or_default().trim().to_string();
        if description.is_empty() {
            diag("description", "missing or empty".into());
        }

        let base_prompt = self.base_prompt.unwrap_or_default().trim_end().to_string();
        if base_prompt.trim().is_empty() {
            diag("base_prompt", "missing or empty".into());
        } else {
            match placeholders(&base_prompt) {
                Ok(names) => {
                    for name in names {
                        if !SUPPORTED_PLACEHOLDERS.contains(&name.as_str()) {
                            diag("base_prompt", format!("unknown placeholder `{name}`"));
                        }
                    }
                }
                Err(e) => diag("base_prompt", e.to_string()),
            }
        }

        if out.len() > before {
            return None;
        }
        Some(AgentSpec {
            id: AgentId(id),
            display_name,
            color: color?,
            description,
            base_prompt,
        })
    }
}

fn line_column(text: &str, offset: usize) -> (usize, usize) {
    let prefix = &text[..offset.min(text.len())];
    let line = prefix.matches('\n').count() + 1;
    let column = prefix.rfind('\n').map_or(prefix.len(), |i| prefix.len() - i - 1) + 1;
    (line, column)
}

/// Parse and validate a persona document. Every invalid field of every
/// persona is reported, as are ids duplicated within the document.
pub fn parse_personas(text: &str) -> Result<Vec<AgentSpec>, PersonaError> {
    let file: PersonaFile = toml::from_str(text).map_err(|e| {
        let (line, column) = e
            .span()
            .map(|span| line_column(text, span.start))
            .unwrap_or((0, 0));
        PersonaError::Parse {
            line,
            column,
            message: e.message().to_string(),
        }
    })?;

    let mut diagnostics = Vec::new();
    let mut specs = Vec::new();
    let mut seen = HashSet::new();
    for (index, raw) in file.persona.into_iter().enumerate() {
        let location = match raw.id.as_deref() {
            Some(id) => format!("persona[{index}] (id \"{id}\")"),
            None => format!("persona[{index}]"),
        };
        if let Some(spec) = raw.validate(&location, &mut diagnostics) {
            if !seen.insert(spec.id.to_ascii_lowercase()) {
                diagnostics.push(PersonaDiagnostic {
                    location,
                    field: "id".into(),
                    message: format!("duplicate id `{}`", spec.id),
                });
            }
            specs.push(spec);
        }
    }
    if diagnostics.is_empty() {
        Ok(specs)
    } else {
        Err(PersonaError::Invalid(diagnostics))
    }
}

pub fn read_personas(path: &Path) -> Result<Vec<AgentSpec>, PersonaError> {
    let text = std::fs::read_to_string(path).map_err(|source| PersonaError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_personas(&text)
}

/// Load plug-in personas from `path` and append them to `base`. Nothing is
/// registered unless every persona validates and no id collides.
pub fn load_agent_plugins(base: &AgentSet, path: &Path) -> Result<AgentSet, PersonaError> {
    let extra = read_personas(path)?;
    base.extend(extra).map_err(|e| {
        let id = match &e {
            AgentSetError::DuplicateId(id) => id.clone(),
            AgentSetError::TooFew(_) => String::new(),
        };
        PersonaError::Invalid(vec![PersonaDiagnostic {
            location: format!("persona (id \"{id}\")"),
            field: "id".into(),
            message: e.to_string(),
        }])
    })
}
