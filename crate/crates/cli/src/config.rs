//! Recipe config loading with `--section.key value` overrides.

use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use metafsod::pipeline::RecipeConfig;
use serde_json::Value;

const SECTIONS: [&str; 3] = ["data", "model", "train"];

/// One `--section.key value` pair pulled out of the command line.
#[derive(Debug, Clone, PartialEq)]
pub struct Override {
    pub key: String,
    pub value: String,
}

/// Splits dotted overrides from the arguments clap should see.
pub fn extract_overrides(args: Vec<String>) -> Result<(Vec<String>, Vec<Override>)> {
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        let Some(flag) = arg.strip_prefix("--") else {
            rest.push(arg);
            continue;
        };
        let (name, inline) = match flag.split_once('=') {
            Some((n, v)) => (n.to_string(), Some(v.to_string())),
            None => (flag.to_string(), None),
        };
        let is_override = name
            .split_once('.')
            .is_some_and(|(section, key)| SECTIONS.contains(&section) && !key.is_empty());
        if !is_override {
            rest.push(arg);
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => it.next().ok_or_else(|| anyhow!("--{name} needs a value"))?,
        };
        overrides.push(Override { key: name, value });
    }
    Ok((rest, overrides))
}

/// Reads `path` (or the defaults) and applies `overrides` in order.
pub fn load(path: Option<&Path>, overrides: &[Override]) -> Result<RecipeConfig> {
    let base = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("cannot read config {}", p.display()))?;
            serde_json::from_str::<RecipeConfig>(&text).with_context(|| format!("invalid config {}", p.display()))?
        }
        None => RecipeConfig::default(),
    };
    apply(base, overrides)
}

pub fn apply(config: RecipeConfig, overrides: &[Override]) -> Result<RecipeConfig> {
    if overrides.is_empty() {
        return Ok(config);
    }
    let mut tree = serde_json::to_value(&config)?;
    for o in overrides {
        let value = serde_json::from_str::<Value>(&o.value).unwrap_or_else(|_| Value::String(o.value.clone()));
        let mut node = &mut tree;
        let parts: Vec<&str> = o.key.split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let obj = node
                .as_object_mut()
                .ok_or_else(|| anyhow!("config key {} does not name a field", o.key))?;
            if !obj.contains_key(*part) {
                bail!("unknown config key {}", o.key);
            }
            let slot = obj.get_mut(*part).expect("checked");
            if i + 1 == parts.len() {
                *slot = value.clone();
            }
            node = slot;
        }
    }
    serde_json::from_value(tree).map_err(|e| anyhow!("invalid override: {e}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn pulls_out_dotted_flags_only() {
        let (rest, ov) = extract_overrides(args(&["train", "base", "--train.lambda", "0.5", "--out=x", "--model.leaky_slope=0.2"])).unwrap();
        assert_eq!(rest, args(&["train", "base", "--out=x"]));
        assert_eq!(ov.len(), 2);
        assert_eq!(ov[0].key, "train.lambda");
        assert_eq!(ov[1].value, "0.2");
        assert!(extract_overrides(args(&["--train.lambda"])).is_err());
    }

    #[test]
    fn overrides_apply_and_type_check() {
        let ov = |k: &str, v: &str| Override {
            key: k.into(),
            value: v.into(),
        };
        let c = apply(RecipeConfig::default(), &[ov("train.lambda", "0.5"), ov("train.class_targets", "column")]).unwrap();
        assert_eq!(c.train.lambda, 0.5);
        assert_eq!(c.train.class_targets, metafsod::loss::ClassTargets::Column);
        assert!(apply(RecipeConfig::default(), &[ov("train.nope", "1")]).is_err());
        assert!(apply(RecipeConfig::default(), &[ov("train.epochs_base", "many")]).is_err());
    }
}
