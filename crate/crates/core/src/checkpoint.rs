//! Parameter checkpoints stored in the shared tensor container.

use std::path::Path;

use serde::Serialize;
use serde_json::Value;

use crate::error::{Error, Result};
use crate::features::Container;
use crate::numerics::ParamSet;

/// Packs `params` under `kind`, adding the parameter-name manifest and the
/// parameter digest to `meta`.
pub fn to_container(kind: &str, mut meta: Value, params: &ParamSet) -> Container {
    if let Value::Object(m) = &mut meta {
        m.insert("param_names".into(), Value::from(params.names().to_vec()));
        m.insert("param_digest".into(), Value::from(params.digest()));
        m.insert("code_version".into(), Value::from(crate::CODE_VERSION));
    }
    let mut c = Container::new(kind, meta);
    for (name, t) in params.iter() {
        c.push(name, t.clone());
    }
    c
}

/// Unpacks a checkpoint of the given kind.
pub fn from_container(c: &Container, kind: &str) -> Result<(Value, ParamSet)> {
    if c.kind != kind {
        return Err(Error::Compatibility {
            field: "kind".into(),
            detail: format!("expected a `{kind}` checkpoint, found `{}`", c.kind),
        });
    }
    let mut params = ParamSet::new();
    for (name, t) in &c.fields {
        params.insert(name.clone(), t.clone());
    }
    Ok((c.meta.clone(), params))
}

/// Copies the keys of `extra` (an object) into `meta`.
pub fn merge_meta(meta: &mut Value, extra: &Value) {
    if let (Value::Object(m), Value::Object(e)) = (meta, extra) {
        for (k, v) in e {
            m.insert(k.clone(), v.clone());
        }
    }
}

pub fn save(path: &Path, kind: &str, meta: Value, params: &ParamSet) -> Result<()> {
    to_container(kind, meta, params).write(path)
}

pub fn load(path: &Path, kind: &str) -> Result<(Value, ParamSet)> {
    from_container(&Container::read(path)?, kind)
}

/// Compares `expected` against the object stored under `meta[key]`, naming
/// the first field that differs.
pub fn ensure_compatible<T: Serialize>(meta: &Value, key: &str, expected: &T) -> Result<()> {
    let expected = serde_json::to_value(expected).expect("config serializes");
    let stored = meta.get(key).ok_or_else(|| Error::Compatibility {
        field: key.into(),
        detail: "missing from checkpoint".into(),
    })?;
    match (&expected, stored) {
        (Value::Object(e), Value::Object(s)) => {
            for (name, ev) in e {
                match s.get(name) {
                    Some(sv) if sv == ev => {}
                    Some(sv) => {
                        return Err(Error::Compatibility {
                            field: format!("{key}.{name}"),
                            detail: format!("checkpoint has {sv}, configuration has {ev}"),
                        })
                    }
                    None => {
                        return Err(Error::Compatibility {
                            field: format!("{key}.{name}"),
                            detail: "missing from checkpoint".into(),
                        })
                    }
                }
            }
            Ok(())
        }
        _ if &expected == stored => Ok(()),
        _ => Err(Error::Compatibility {
            field: key.into(),
            detail: format!("checkpoint has {stored}, configuration has {expected}"),
        }),
    }
}
