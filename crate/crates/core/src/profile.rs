//! Gardener profile captured at onboarding.
//!
//! The profile is the four-part tuple (experience, location, month, cultural
//! background). It is validated once, then rendered into a fixed labeled
//! block that is appended to every agent's system prompt.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Rendered in place of an empty cultural background.
pub const NOT_SPECIFIED: &str = "not specified";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Experience {
    Novice,
    Beginner,
    Intermediate,
    Experienced,
}

impl Experience {
    pub const ALL: [Experience; 4] = [
        Experience::Novice,
        Experience::Beginner,
        Experience::Intermediate,
        Experience::Experienced,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Experience::Novice => "novice",
            Experience::Beginner => "beginner",
            Experience::Intermediate => "intermediate",
            Experience::Experienced => "experienced",
        }
    }
}

impl fmt::Display for Experience {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Experience {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Experience::ALL
            .into_iter()
            .find(|e| e.label() == s.trim())
            .ok_or(())
    }
}

/// A validated gardener profile. Construct through [`validate_profile`] or
/// [`UserProfile::new`]; both enforce the field invariants.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "ProfileRecord")]
pub struct UserProfile {
    experience: Experience,
    location: String,
    month: u8,
    cultural_background: String,
}

#[derive(Deserialize)]
struct ProfileRecord {
    experience: Experience,
    location: String,
    month: u8,
    #[serde(default)]
    cultural_background: String,
}

impl TryFrom<ProfileRecord> for UserProfile {
    type Error = ProfileErrors;

    fn try_from(r: ProfileRecord) -> Result<Self, Self::Error> {
        UserProfile::new(r.experience, &r.location, r.month, &r.cultural_background)
    }
}

impl UserProfile {
    pub fn new(
        experience: Experience,
        location: &str,
        month: u8,
        cultural_background: &str,
    ) -> Result<Self, ProfileErrors> {
        let mut errors = Vec::new();
        check_location(location, &mut errors);
        check_month(month as i64, &mut errors);
        if !errors.is_empty() {
            return Err(ProfileErrors(errors));
        }
        Ok(Self {
            experience,
            location: location.trim().to_string(),
            month,
            cultural_background: cultural_background.trim().to_string(),
        })
    }

    pub fn experience(&self) -> Experience {
        self.experience
    }

    pub fn location(&self) -> &str {
        &self.location
    }

    pub fn month(&self) -> u8 {
        self.month
    }

    pub fn month_name(&self) -> &'static str {
        month_name(self.month)
    }

    pub fn cultural_background(&self) -> &str {
        &self.cultural_background
    }

    /// The cultural background, or [`NOT_SPECIFIED`] when the gardener left
    /// it blank.
    pub fn cultural_background_display(&self) -> &str {
        if self.cultural_background.is_empty() {
            NOT_SPECIFIED
        } else {
            &self.cultural_background
        }
    }
}

/// One invalid onboarding field.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

impl FieldError {
    fn new(field: &str, message: impl Into<String>) -> Self {
        Self {
            field: field.to_string(),
            message: message.into(),
        }
    }
}

impl fmt::Display for FieldError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

/// Every invalid field of a rejected profile, in form order.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{}", join_errors(.0))]
pub struct ProfileErrors(pub Vec<FieldError>);

impl ProfileErrors {
    pub fn fields(&self) -> Vec<&str> {
        self.0.iter().map(|e| e.field.as_str()).collect()
    }
}

fn join_errors(errors: &[FieldError]) -> String {
    errors
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}

fn check_location(location: &str, errors: &mut Vec<FieldError>) {
    if location.trim().is_empty() {
        errors.push(FieldError::new("location", "empty"));
    }
}

fn check_month(month: i64, errors: &mut Vec<FieldError>) {
    if !(1..=12).contains(&month) {
        errors.push(FieldError::new("month", "out of range"));
    }
}

/// Validate raw onboarding text fields. Every invalid field is reported, not
/// just the first one encountered.
pub fn validate_profile(raw: &BTreeMap<String, String>) -> Result<UserProfile, ProfileErrors> {
    let mut errors = Vec::new();

    let experience = match raw.get("experience") {
        None => {
            errors.push(FieldError::new("experience", "missing"));
            None
        }
        Some(value) => match value.parse::<Experience>() {
            Ok(e) => Some(e),
            Err(()) => {
                errors.push(FieldError::new("experience", "not in enum"));
                None
            }
        },
    };

    let location = raw.get("location").map(String::as_str).unwrap_or("");
    check_location(location, &mut errors);

    let month = match raw.get("month") {
        None => {
            errors.push(FieldError::new("month", "missing"));
            None
        }
        Some(value) => match value.trim().parse::<i64>() {
            Ok(m) => {
                check_month(m, &mut errors);
                u8::try_from(m).ok()
            }
            Err(_) => {
                errors.push(FieldError::new("month", "not an integer"));
                None
            }
        },
    };

    let cultural_background = raw
        .get("cultural_background")
        .map(|c| c.trim().to_string())
        .unwrap_or_default();

    match (experience, month) {
        (Some(experience), Some(month)) if errors.is_empty() => Ok(UserProfile {
            experience,
            location: location.trim().to_string(),
            month,
            cultural_background,
        }),
        _ => Err(ProfileErrors(errors)),
    }
}

/// Validate a JSON onboarding object as sent by the web client. Scalars are
/// coerced to text (the month may arrive as `4` or `"4"`).
pub fn validate_profile_json(value: &serde_json::Value) -> Result<UserProfile, ProfileErrors> {
    let Some(object) = value.as_object() else {
        return Err(ProfileErrors(vec![FieldError::new(
            "profile",
            "expected an object",
        )]));
    };
    let raw = object
        .iter()
        .filter_map(|(k, v)| {
            let text = match v {
                serde_json::Value::String(s) => s.clone(),
                serde_json::Value::Number(n) => n.to_string(),
                serde_json::Value::Null => return None,
                other => other.to_string(),
            };
            Some((k.clone(), text))
        })
        .collect();
    validate_profile(&raw)
}

pub fn month_name(month: u8) -> &'static str {
    chrono::Month::try_from(month)
        .map(|m| m.name())
        .unwrap_or("unknown")
}

/// Render the canonical four-line profile block injected into agent prompts.
pub fn serialize_profile(profile: &UserProfile) -> String {
    format!(
        "Gardener experience level: {}\nLocation: {}\nCurrent month: {}\nCultural background: {}\n",
        profile.experience,
        profile.location,
        profile.month_name(),
        profile.cultural_background_display(),
    )
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use proptest::prelude::*;

    fn raw(e: &str, l: &str, m: &str, c: &str) -> BTreeMap<String, String> {
        [
            ("experience", e),
            ("location", l),
            ("month", m),
            ("cultural_background", c),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
    }

    #[test]
    fn accepts_empty_cultural_background() {
        let p = validate_profile(&raw("novice", "Atlanta, GA", "4", "")).unwrap();
        assert_eq!(p.experience(), Experience::Novice);
        assert_eq!(p.location(), "Atlanta, GA");
        assert_eq!(p.month(), 4);
        assert_eq!(p.cultural_background(), "");
    }

    #[test]
    fn rejects_unknown_experience() {
        let err = validate_profile(&raw("expert", "Atlanta, GA", "4", "")).unwrap_err();
        assert_eq!(err.0, vec![FieldError::new("experience", "not in enum")]);
    }

    #[test]
    fn reports_every_invalid_field() {
        let err = validate_profile(&raw("novice", "  ", "13", "Ilokano")).unwrap_err();
        assert_eq!(
            err.0,
            vec![
                FieldError::new("location", "empty"),
                FieldError::new("month", "out of range"),
            ]
        );
    }

    #[test]
    fn missing_and_non_numeric_fields() {
        let mut m = BTreeMap::new();
        m.insert("month".to_string(), "April".to_string());
        let err = validate_profile(&m).unwrap_err();
        assert_eq!(err.fields(), vec!["experience", "location", "month"]);
        assert_eq!(err.0[2].message, "not an integer");
    }

    #[test]
    fn json_month_may_be_number_or_text() {
        let a = serde_json::json!({"experience":"beginner","location":"Hilo","month":11,"cultural_background":null});
        let b = serde_json::json!({"experience":"beginner","location":"Hilo","month":"11"});
        assert_eq!(validate_profile_json(&a).unwrap(), validate_profile_json(&b).unwrap());
        assert!(validate_profile_json(&serde_json::json!([1])).is_err());
    }

    #[test]
    fn serialized_block_has_fixed_labels() {
        let p = UserProfile::new(Experience::Novice, "Atlanta, GA", 4, "").unwrap();
        assert_eq!(
            serialize_profile(&p),
            "Gardener experience level: novice\nLocation: Atlanta, GA\nCurrent month: April\nCultural background: not specified\n"
        );
        assert_eq!(serialize_profile(&p), serialize_profile(&p.clone()));
    }

    #[test]
    fn serialized_block_keeps_values_verbatim() {
        let p = UserProfile::new(
            Experience::Experienced,
            "Hilo, Hawaii",
            11,
            "Hawaiian / Pacific Islander",
        )
        .unwrap();
        let text = serialize_profile(&p);
        for needle in ["experienced", "Hilo, Hawaii", "November", "Hawaiian / Pacific Islander"] {
            assert!(text.contains(needle), "missing {needle}");
        }
    }

    pub(crate) fn arb_profile() -> impl Strategy<Value = UserProfile> {
        (
            proptest::sample::select(Experience::ALL.to_vec()),
            "[A-Za-z][A-Za-z ,.'-]{0,30}",
            1u8..=12,
            proptest::option::of("[A-Za-z /-]{1,24}"),
        )
            .prop_map(|(e, l, m, c)| {
                UserProfile::new(e, &l, m, c.as_deref().unwrap_or("")).unwrap()
            })
    }

    proptest! {
        #[test]
        fn serialization_contains_every_field(p in arb_profile()) {
            let text = serialize_profile(&p);
            prop_assert!(text.contains(p.experience().label()));
            prop_assert!(text.contains(p.location()));
            prop_assert!(text.contains(p.month_name()));
            prop_assert!(text.contains(p.cultural_background_display()));
            prop_assert_eq!(text.clone(), serialize_profile(&p));
        }

        #[test]
        fn validation_never_builds_invalid_profile(
            e in "[a-z]{0,14}",
            l in "[ a-zA-Z]{0,8}",
            m in "-?[0-9]{1,3}",
        ) {
            if let Ok(p) = validate_profile(&raw(&e, &l, &m, "")) {
                prop_assert!(Experience::ALL.contains(&p.experience()));
                prop_assert!(!p.location().trim().is_empty());
                prop_assert!((1..=12).contains(&p.month()));
            }
        }
    }
}
