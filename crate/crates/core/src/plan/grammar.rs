//! Line-oriented grammar for estimand specs.
//!
//! ```text
//! # comments start with '#'
//! [estimand]
//! name = primary
//! population = all_randomized | baseline_subset(min=..,max=..) | principal_stratum(c=..)
//! endpoint = continuous_change
//!          | composite(threshold=.., direction=at_most|at_least,
//!                      failure_kinds=a|b, failure_causes=c|d)
//! summary = difference_in_means | difference_in_proportions
//! pragmatic = true | false
//!
//! [regimen]
//! part_of_regimen = rescue_start | discontinuation   # kinds, possibly empty
//!
//! [strategies]          # one entry per cause; kind entries override
//! ae_normal = nth
//! ...
//!
//! [imputation]          # per cause/kind; `non_ice` for event-free missingness
//! ae_normal = return_to_baseline
//! lack_of_efficacy = mar(delta=0.5)
//! admin_lost_to_follow_up = special_pattern(donor=lack_of_efficacy)
//! pandemic_control = jump_to_reference(reference=control)
//!
//! [sensitivity]
//! death_delta = 0.0
//! ```
//!
//! Unknown sections, unknown keys, duplicate sections, and duplicate keys
//! are errors, each reported with a line and column.

use super::{
    EstimandSpec, IceStrategy, MethodKind, MethodSpec, Population, StrategyKey, SummaryMeasure,
};
use crate::model::{Arm, CompositeEndpoint, IceCause, IceKind, SuccessDirection};
use crate::plan::Endpoint;
use std::collections::BTreeSet;
use std::fmt;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}, column {col}: {msg}")]
pub struct ParseError {
    pub line: usize,
    pub col: usize,
    pub msg: String,
}

fn err(line: usize, col: usize, msg: impl Into<String>) -> ParseError {
    ParseError { line, col, msg: msg.into() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Section {
    None,
    Estimand,
    Regimen,
    Strategies,
    Imputation,
    Sensitivity,
}

/// A `head(k=v, ...)` value.
struct Call<'a> {
    head: &'a str,
    attrs: Vec<(&'a str, &'a str)>,
}

fn parse_call(value: &str, line: usize, col: usize) -> Result<Call<'_>, ParseError> {
    let value = value.trim();
    match value.find('(') {
        None => Ok(Call { head: value, attrs: Vec::new() }),
        Some(open) => {
            if !value.ends_with(')') {
                return Err(err(line, col, "expected closing ')'"));
            }
            let head = value[..open].trim();
            let inner = &value[open + 1..value.len() - 1];
            let mut attrs = Vec::new();
            for part in inner.split(',') {
                let part = part.trim();
                if part.is_empty() {
                    continue;
                }
                let eq = part
                    .find('=')
                    .ok_or_else(|| err(line, col, format!("expected key=value in '{part}'")))?;
                attrs.push((part[..eq].trim(), part[eq + 1..].trim()));
            }
            Ok(Call { head, attrs })
        }
    }
}

fn parse_f64(s: &str, line: usize, col: usize) -> Result<f64, ParseError> {
    match s {
        "inf" | "+inf" => Ok(f64::INFINITY),
        "-inf" => Ok(f64::NEG_INFINITY),
        _ => s.parse::<f64>().map_err(|_| err(line, col, format!("expected a number, got '{s}'"))),
    }
}

fn parse_bool(s: &str, line: usize, col: usize) -> Result<bool, ParseError> {
    match s {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(err(line, col, format!("expected true or false, got '{s}'"))),
    }
}

fn parse_arm(s: &str, line: usize, col: usize) -> Result<Arm, ParseError> {
    match s {
        "control" | "0" => Ok(Arm::Control),
        "experimental" | "1" => Ok(Arm::Experimental),
        _ => Err(err(line, col, format!("expected control or experimental, got '{s}'"))),
    }
}

fn parse_pipe_list(s: &str) -> impl Iterator<Item = &str> {
    s.split('|').map(str::trim).filter(|p| !p.is_empty())
}

fn parse_strategy(s: &str, line: usize, col: usize) -> Result<IceStrategy, ParseError> {
    Ok(match s {
        "cdh" => IceStrategy::Cdh,
        "nth" => IceStrategy::Nth,
        "pth" => IceStrategy::Pth,
        "treatment_policy" => IceStrategy::TreatmentPolicy,
        "dtr" => IceStrategy::Dtr,
        "composite" => IceStrategy::Composite,
        "principal_stratum" => IceStrategy::PrincipalStratum,
        _ => return Err(err(line, col, format!("unknown strategy '{s}'"))),
    })
}

fn parse_method(value: &str, line: usize, col: usize) -> Result<MethodSpec, ParseError> {
    let call = parse_call(value, line, col)?;
    let kind = match call.head {
        "mar" => MethodKind::Mar,
        "return_to_baseline" => MethodKind::ReturnToBaseline,
        "retrieved_dropout" => MethodKind::RetrievedDropout,
        "jump_to_reference" => MethodKind::JumpToReference,
        "copy_reference" => MethodKind::CopyReference,
        "special_pattern" => MethodKind::SpecialPattern,
        other => return Err(err(line, col, format!("unknown imputation method '{other}'"))),
    };
    let mut spec = MethodSpec::of(kind);
    for (k, v) in call.attrs {
        match k {
            "delta" => spec.delta = Some(parse_f64(v, line, col)?),
            "reference" => {
                if !matches!(kind, MethodKind::JumpToReference | MethodKind::CopyReference) {
                    return Err(err(line, col, format!("'reference' does not apply to {kind}")));
                }
                spec.reference = parse_arm(v, line, col)?;
            }
            "donor" => {
                if kind != MethodKind::SpecialPattern {
                    return Err(err(line, col, format!("'donor' does not apply to {kind}")));
                }
                spec.donor = Some(
                    IceCause::parse(v)
                        .ok_or_else(|| err(line, col, format!("unknown donor cause '{v}'")))?,
                );
            }
            other => return Err(err(line, col, format!("unknown attribute '{other}'"))),
        }
    }
    if kind == MethodKind::SpecialPattern && spec.donor.is_none() {
        return Err(err(line, col, "special_pattern requires donor=<cause>"));
    }
    Ok(spec)
}

fn parse_strategy_key(s: &str, line: usize, col: usize) -> Result<StrategyKey, ParseError> {
    if let Some(c) = IceCause::parse(s) {
        return Ok(StrategyKey::Cause(c));
    }
    if let Some(k) = IceKind::parse(s) {
        return Ok(StrategyKey::Kind(k));
    }
    Err(err(line, col, format!("'{s}' is neither an event cause nor an event kind")))
}

fn parse_population(value: &str, line: usize, col: usize) -> Result<Population, ParseError> {
    let call = parse_call(value, line, col)?;
    match call.head {
        "all_randomized" => Ok(Population::AllRandomized),
        "baseline_subset" => {
            let mut min = None;
            let mut max = None;
            for (k, v) in call.attrs {
                match k {
                    "min" => min = Some(parse_f64(v, line, col)?),
                    "max" => max = Some(parse_f64(v, line, col)?),
                    other => return Err(err(line, col, format!("unknown attribute '{other}'"))),
                }
            }
            if min.is_none() && max.is_none() {
                return Err(err(line, col, "baseline_subset needs min and/or max"));
            }
            Ok(Population::BaselineSubset { min, max })
        }
        "principal_stratum" => {
            let mut threshold = None;
            for (k, v) in call.attrs {
                match k {
                    "c" => threshold = Some(parse_f64(v, line, col)?),
                    other => return Err(err(line, col, format!("unknown attribute '{other}'"))),
                }
            }
            let threshold =
                threshold.ok_or_else(|| err(line, col, "principal_stratum requires c=<threshold>"))?;
            Ok(Population::PrincipalStratum { threshold })
        }
        other => Err(err(line, col, format!("unknown population '{other}'"))),
    }
}

fn parse_endpoint(value: &str, line: usize, col: usize) -> Result<Endpoint, ParseError> {
    let call = parse_call(value, line, col)?;
    match call.head {
        "continuous_change" => Ok(Endpoint::ContinuousChange),
        "composite" => {
            let mut threshold = None;
            let mut direction = SuccessDirection::AtMost;
            let mut failure_kinds = Vec::new();
            let mut failure_causes = Vec::new();
            for (k, v) in call.attrs {
                match k {
                    "threshold" => threshold = Some(parse_f64(v, line, col)?),
                    "direction" => {
                        direction = match v {
                            "at_most" => SuccessDirection::AtMost,
                            "at_least" => SuccessDirection::AtLeast,
                            _ => return Err(err(line, col, format!("unknown direction '{v}'"))),
                        }
                    }
                    "failure_kinds" => {
                        for item in parse_pipe_list(v) {
                            failure_kinds.push(IceKind::parse(item).ok_or_else(|| {
                                err(line, col, format!("unknown event kind '{item}'"))
                            })?);
                        }
                    }
                    "failure_causes" => {
                        for item in parse_pipe_list(v) {
                            failure_causes.push(IceCause::parse(item).ok_or_else(|| {
                                err(line, col, format!("unknown event cause '{item}'"))
                            })?);
                        }
                    }
                    other => return Err(err(line, col, format!("unknown attribute '{other}'"))),
                }
            }
            let threshold =
                threshold.ok_or_else(|| err(line, col, "composite requires threshold=<value>"))?;
            Ok(Endpoint::Composite(CompositeEndpoint {
                threshold,
                direction,
                failure_kinds,
                failure_causes,
            }))
        }
        other => Err(err(line, col, format!("unknown endpoint '{other}'"))),
    }
}

/// Parse an estimand spec from text.
pub fn parse_spec(text: &str) -> Result<EstimandSpec, ParseError> {
    let mut spec = EstimandSpec::default();
    let mut summary_given = false;
    let mut section = Section::None;
    let mut seen_sections: BTreeSet<&str> = BTreeSet::new();
    let mut seen_keys: BTreeSet<(Section, String)> = BTreeSet::new();

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        };
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let col_of = |needle: &str| raw.find(needle).map_or(1, |p| p + 1);

        if let Some(name) = trimmed.strip_prefix('[') {
            let name = name
                .strip_suffix(']')
                .ok_or_else(|| err(line_no, col_of("["), "expected closing ']'"))?
                .trim();
            section = match name {
                "estimand" => Section::Estimand,
                "regimen" => Section::Regimen,
                "strategies" => Section::Strategies,
                "imputation" => Section::Imputation,
                "sensitivity" => Section::Sensitivity,
                other => {
                    return Err(err(line_no, col_of("["), format!("unknown section '{other}'")))
                }
            };
            if !seen_sections.insert(match section {
                Section::Estimand => "estimand",
                Section::Regimen => "regimen",
                Section::Strategies => "strategies",
                Section::Imputation => "imputation",
                Section::Sensitivity => "sensitivity",
                Section::None => unreachable!(),
            }) {
                return Err(err(line_no, col_of("["), format!("duplicate section '{name}'")));
            }
            continue;
        }

        let eq = trimmed
            .find('=')
            .ok_or_else(|| err(line_no, 1, "expected 'key = value'"))?;
        let key = trimmed[..eq].trim();
        let value = trimmed[eq + 1..].trim();
        let key_col = col_of(key);
        let value_col = if value.is_empty() { key_col } else { col_of(value) };
        if key.is_empty() {
            return Err(err(line_no, 1, "empty key"));
        }
        if !seen_keys.insert((section, key.to_string())) {
            return Err(err(line_no, key_col, format!("duplicate entry for '{key}'")));
        }

        match section {
            Section::None => {
                return Err(err(line_no, key_col, "entries must appear inside a [section]"))
            }
            Section::Estimand => match key {
                "name" => {
                    if value.is_empty() || !value.chars().all(|c| c.is_alphanumeric() || "_-".contains(c)) {
                        return Err(err(line_no, value_col, "name must be a single word"));
                    }
                    spec.name = value.to_string();
                }
                "population" => spec.population = parse_population(value, line_no, value_col)?,
                "endpoint" => spec.endpoint = parse_endpoint(value, line_no, value_col)?,
                "summary" => {
                    spec.summary = match value {
                        "difference_in_means" => SummaryMeasure::DifferenceInMeans,
                        "difference_in_proportions" => SummaryMeasure::DifferenceInProportions,
                        _ => {
                            return Err(err(line_no, value_col, format!("unknown summary '{value}'")))
                        }
                    };
                    summary_given = true;
                }
                "pragmatic" => spec.pragmatic = parse_bool(value, line_no, value_col)?,
                other => return Err(err(line_no, key_col, format!("unknown key '{other}' in [estimand]"))),
            },
            Section::Regimen => match key {
                "part_of_regimen" => {
                    for item in parse_pipe_list(value) {
                        let kind = IceKind::parse(item).ok_or_else(|| {
                            err(line_no, value_col, format!("unknown event kind '{item}'"))
                        })?;
                        spec.regimen_kinds.insert(kind);
                    }
                }
                other => return Err(err(line_no, key_col, format!("unknown key '{other}' in [regimen]"))),
            },
            Section::Strategies => {
                let k = parse_strategy_key(key, line_no, key_col)?;
                let v = parse_strategy(value, line_no, value_col)?;
                spec.strategies.insert(k, v);
            }
            Section::Imputation => {
                if key == "non_ice" {
                    spec.non_ice_method = parse_method(value, line_no, value_col)?;
                } else {
                    let k = parse_strategy_key(key, line_no, key_col)?;
                    let v = parse_method(value, line_no, value_col)?;
                    spec.imputation.insert(k, v);
                }
            }
            Section::Sensitivity => match key {
                "death_delta" => spec.death_delta = parse_f64(value, line_no, value_col)?,
                other => {
                    return Err(err(line_no, key_col, format!("unknown key '{other}' in [sensitivity]")))
                }
            },
        }
    }

    if !summary_given {
        spec.summary = match spec.endpoint {
            Endpoint::ContinuousChange => SummaryMeasure::DifferenceInMeans,
            Endpoint::Composite(_) => SummaryMeasure::DifferenceInProportions,
        };
    }
    Ok(spec)
}

struct FloatToken(f64);

impl fmt::Display for FloatToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0 == f64::INFINITY {
            f.write_str("inf")
        } else if self.0 == f64::NEG_INFINITY {
            f.write_str("-inf")
        } else {
            write!(f, "{:?}", self.0)
        }
    }
}

fn method_token(m: &MethodSpec) -> String {
    let mut attrs = Vec::new();
    if matches!(m.kind, MethodKind::JumpToReference | MethodKind::CopyReference)
        && m.reference == Arm::Experimental
    {
        attrs.push("reference=experimental".to_string());
    }
    if let Some(d) = m.donor {
        attrs.push(format!("donor={d}"));
    }
    if let Some(d) = m.delta {
        attrs.push(format!("delta={}", FloatToken(d)));
    }
    if attrs.is_empty() {
        m.kind.to_string()
    } else {
        format!("{}({})", m.kind, attrs.join(", "))
    }
}

/// Canonical text form; `parse_spec(serialize_spec(s)) == s`.
pub fn serialize_spec(spec: &EstimandSpec) -> String {
    let mut out = String::new();
    let push = |out: &mut String, s: &str| {
        out.push_str(s);
        out.push('\n');
    };

    push(&mut out, "[estimand]");
    push(&mut out, &format!("name = {}", spec.name));
    let population = match &spec.population {
        Population::AllRandomized => "all_randomized".to_string(),
        Population::BaselineSubset { min, max } => {
            let mut attrs = Vec::new();
            if let Some(v) = min {
                attrs.push(format!("min={}", FloatToken(*v)));
            }
            if let Some(v) = max {
                attrs.push(format!("max={}", FloatToken(*v)));
            }
            format!("baseline_subset({})", attrs.join(", "))
        }
        Population::PrincipalStratum { threshold } => {
            format!("principal_stratum(c={})", FloatToken(*threshold))
        }
    };
    push(&mut out, &format!("population = {population}"));
    let endpoint = match &spec.endpoint {
        Endpoint::ContinuousChange => "continuous_change".to_string(),
        Endpoint::Composite(c) => {
            let mut attrs = vec![
                format!("threshold={}", FloatToken(c.threshold)),
                format!(
                    "direction={}",
                    match c.direction {
                        SuccessDirection::AtMost => "at_most",
                        SuccessDirection::AtLeast => "at_least",
                    }
                ),
            ];
            if !c.failure_kinds.is_empty() {
                let items: Vec<&str> = c.failure_kinds.iter().map(|k| k.as_str()).collect();
                attrs.push(format!("failure_kinds={}", items.join("|")));
            }
            if !c.failure_causes.is_empty() {
                let items: Vec<&str> = c.failure_causes.iter().map(|k| k.as_str()).collect();
                attrs.push(format!("failure_causes={}", items.join("|")));
            }
            format!("composite({})", attrs.join(", "))
        }
    };
    push(&mut out, &format!("endpoint = {endpoint}"));
    push(
        &mut out,
        &format!(
            "summary = {}",
            match spec.summary {
                SummaryMeasure::DifferenceInMeans => "difference_in_means",
                SummaryMeasure::DifferenceInProportions => "difference_in_proportions",
            }
        ),
    );
    push(&mut out, &format!("pragmatic = {}", spec.pragmatic));

    push(&mut out, "");
    push(&mut out, "[regimen]");
    let kinds: Vec<&str> = spec.regimen_kinds.iter().map(|k| k.as_str()).collect();
    push(&mut out, &format!("part_of_regimen = {}", kinds.join(" | ")));

    push(&mut out, "");
    push(&mut out, "[strategies]");
    for (k, v) in &spec.strategies {
        push(&mut out, &format!("{k} = {v}"));
    }

    push(&mut out, "");
    push(&mut out, "[imputation]");
    for (k, v) in &spec.imputation {
        push(&mut out, &format!("{k} = {}", method_token(v)));
    }
    push(&mut out, &format!("non_ice = {}", method_token(&spec.non_ice_method)));

    push(&mut out, "");
    push(&mut out, "[sensitivity]");
    push(&mut out, &format!("death_delta = {}", FloatToken(spec.death_delta)));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const MINIMAL: &str = r#"
[strategies]
ae_normal = cdh
ae_pandemic = cdh
lack_of_efficacy = cdh
admin_documented = cdh
admin_lost_to_follow_up = cdh
pandemic_control = cdh
"#;

    #[test]
    fn minimal_spec_has_six_strategy_rows_and_defaults() {
        let spec = parse_spec(MINIMAL).unwrap();
        assert_eq!(spec.strategies.len(), 6);
        assert!(spec.strategies.values().all(|s| *s == IceStrategy::Cdh));
        assert_eq!(spec.population, Population::AllRandomized);
        assert_eq!(spec.summary, SummaryMeasure::DifferenceInMeans);
        assert_eq!(spec.non_ice_method, MethodSpec::of(MethodKind::Mar));
    }

    #[test]
    fn duplicate_entry_is_reported_at_second_occurrence() {
        let text = "[strategies]\nlack_of_efficacy = cdh\nlack_of_efficacy = nth\n";
        let e = parse_spec(text).unwrap_err();
        assert_eq!(e.line, 3);
        assert!(e.msg.contains("duplicate"), "{e}");
    }

    #[test]
    fn duplicate_section_is_an_error() {
        let text = "[strategies]\nae_normal = cdh\n[strategies]\n";
        let e = parse_spec(text).unwrap_err();
        assert_eq!(e.line, 3);
        assert!(e.msg.contains("duplicate section"), "{e}");
    }

    #[test]
    fn unknown_key_and_malformed_values_carry_locations() {
        let e = parse_spec("[estimand]\nwibble = 3\n").unwrap_err();
        assert_eq!((e.line, e.col), (2, 1));
        assert!(e.msg.contains("unknown key"), "{e}");

        let e = parse_spec("[sensitivity]\ndeath_delta = much\n").unwrap_err();
        assert_eq!(e.line, 2);
        assert!(e.msg.contains("expected a number"), "{e}");

        let e = parse_spec("[strategies]\nae_normal = sideways\n").unwrap_err();
        assert!(e.msg.contains("unknown strategy"), "{e}");
    }

    #[test]
    fn method_attributes_parse() {
        let text = r#"
[imputation]
ae_normal = jump_to_reference(reference=experimental, delta=0.25)
admin_lost_to_follow_up = special_pattern(donor=lack_of_efficacy)
"#;
        let spec = parse_spec(text).unwrap();
        let m = &spec.imputation[&StrategyKey::Cause(IceCause::AeNormal)];
        assert_eq!(m.kind, MethodKind::JumpToReference);
        assert_eq!(m.reference, Arm::Experimental);
        assert_eq!(m.delta, Some(0.25));
        let sp = &spec.imputation[&StrategyKey::Cause(IceCause::AdminLostToFollowUp)];
        assert_eq!(sp.donor, Some(IceCause::LackOfEfficacy));

        let e = parse_spec("[imputation]\nae_normal = special_pattern\n").unwrap_err();
        assert!(e.msg.contains("donor"), "{e}");
        let e = parse_spec("[imputation]\nae_normal = mar(reference=control)\n").unwrap_err();
        assert!(e.msg.contains("does not apply"), "{e}");
    }

    #[test]
    fn population_and_endpoint_forms_parse() {
        let text = r#"
[estimand]
population = principal_stratum(c=-inf)
endpoint = composite(threshold=-1.0, direction=at_most, failure_kinds=rescue_start|death)
[strategies]
ae_normal = nth
"#;
        let spec = parse_spec(text).unwrap();
        assert_eq!(spec.population, Population::PrincipalStratum { threshold: f64::NEG_INFINITY });
        match &spec.endpoint {
            Endpoint::Composite(c) => {
                assert_eq!(c.threshold, -1.0);
                assert_eq!(c.failure_kinds, vec![IceKind::RescueStart, IceKind::Death]);
            }
            _ => panic!("expected composite endpoint"),
        }
        // Summary defaults to proportions for a composite endpoint.
        assert_eq!(spec.summary, SummaryMeasure::DifferenceInProportions);
    }

    #[test]
    fn serialize_then_parse_is_identity() {
        let text = r#"
[estimand]
name = phase3-main
population = baseline_subset(min=-0.5, max=2.0)
endpoint = continuous_change
pragmatic = true

[regimen]
part_of_regimen = rescue_start

[strategies]
ae_normal = pth
ae_pandemic = cdh
lack_of_efficacy = cdh
admin_documented = cdh
admin_lost_to_follow_up = cdh
pandemic_control = cdh
death = nth

[imputation]
ae_normal = retrieved_dropout
lack_of_efficacy = mar(delta=0.125)
admin_lost_to_follow_up = special_pattern(donor=lack_of_efficacy)
non_ice = mar

[sensitivity]
death_delta = 0.5
"#;
        let spec = parse_spec(text).unwrap();
        let round = parse_spec(&serialize_spec(&spec)).unwrap();
        assert_eq!(spec, round);
    }
}
