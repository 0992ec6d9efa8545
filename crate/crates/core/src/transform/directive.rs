use std::fmt;

use serde_json::{json, Map, Value};

use crate::program::NodeId;

/// One transformation request. Optional `names` choose the ids of created
/// nodes, positionally in the order the transformation reports them.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Directive {
    SplitArRsAg { target: NodeId, names: Vec<String> },
    ReorderAllGather { ag: NodeId, comps: Vec<NodeId>, names: Vec<String> },
    ReorderBroadcast { bc: NodeId, comps: Vec<NodeId>, names: Vec<String> },
    FuseComputation { ids: Vec<NodeId>, name: Option<String> },
    FuseAllReduce { rs: NodeId, comps: Vec<NodeId>, ag: NodeId, name: Option<String> },
    FuseSend { comp: NodeId, send: NodeId, name: Option<String> },
    Overlap { ids: Vec<NodeId>, name: Option<String> },
    AsSlice { tensor: String },
    Dead { id: NodeId },
}

impl Directive {
    pub fn kind(&self) -> &'static str {
        match self {
            Directive::SplitArRsAg { .. } => "split_ar_rs_ag",
            Directive::ReorderAllGather { .. } => "reorder_allgather",
            Directive::ReorderBroadcast { .. } => "reorder_broadcast",
            Directive::FuseComputation { .. } => "fuse_computation",
            Directive::FuseAllReduce { .. } => "fuse_allreduce",
            Directive::FuseSend { .. } => "fuse_send",
            Directive::Overlap { .. } => "overlap",
            Directive::AsSlice { .. } => "as_slice",
            Directive::Dead { .. } => "dead",
        }
    }

    pub fn to_json(&self) -> Value {
        let mut args = Map::new();
        let mut put = |k: &str, v: Value| {
            args.insert(k.to_string(), v);
        };
        let names = |n: &Vec<String>| if n.is_empty() { None } else { Some(json!(n)) };
        match self {
            Directive::SplitArRsAg { target, names: n } => {
                put("target", json!(target));
                if let Some(n) = names(n) {
                    put("names", n);
                }
            }
            Directive::ReorderAllGather { ag, comps, names: n } => {
                put("ag", json!(ag));
                put("comps", json!(comps));
                if let Some(n) = names(n) {
                    put("names", n);
                }
            }
            Directive::ReorderBroadcast { bc, comps, names: n } => {
                put("bc", json!(bc));
                put("comps", json!(comps));
                if let Some(n) = names(n) {
                    put("names", n);
                }
            }
            Directive::FuseComputation { ids, name } | Directive::Overlap { ids, name } => {
                put("ids", json!(ids));
                if let Some(n) = name {
                    put("name", json!(n));
                }
            }
            Directive::FuseAllReduce { rs, comps, ag, name } => {
                put("rs", json!(rs));
                put("comps", json!(comps));
                put("ag", json!(ag));
                if let Some(n) = name {
                    put("name", json!(n));
                }
            }
            Directive::FuseSend { comp, send, name } => {
                put("comp", json!(comp));
                put("send", json!(send));
                if let Some(n) = name {
                    put("name", json!(n));
                }
            }
            Directive::AsSlice { tensor } => put("tensor", json!(tensor)),
            Directive::Dead { id } => put("id", json!(id)),
        }
        json!({"kind": self.kind(), "args": args})
    }

    pub fn from_json(v: &Value) -> Result<Directive, String> {
        let kind = v.get("kind").and_then(Value::as_str).ok_or("directive without a kind")?;
        let empty = Map::new();
        let args = match v.get("args") {
            Some(Value::Object(a)) => a,
            None => &empty,
            Some(_) => return Err(format!("{kind}: args must be an object")),
        };
        let s = |k: &str| -> Result<String, String> {
            args.get(k).and_then(Value::as_str).map(str::to_string).ok_or(format!("{kind}: missing string '{k}'"))
        };
        let list = |k: &str| -> Result<Vec<String>, String> {
            match args.get(k) {
                None => Ok(Vec::new()),
                Some(Value::Array(a)) => a
                    .iter()
                    .map(|x| x.as_str().map(str::to_string).ok_or(format!("{kind}: '{k}' must hold strings")))
                    .collect(),
                Some(_) => Err(format!("{kind}: '{k}' must be a list")),
            }
        };
        let name = || args.get("name").and_then(Value::as_str).map(str::to_string);
        Ok(match kind {
            "split_ar_rs_ag" => Directive::SplitArRsAg { target: s("target")?, names: list("names")? },
            "reorder_allgather" => {
                Directive::ReorderAllGather { ag: s("ag")?, comps: list("comps")?, names: list("names")? }
            }
            "reorder_broadcast" => {
                Directive::ReorderBroadcast { bc: s("bc")?, comps: list("comps")?, names: list("names")? }
            }
            "fuse_computation" => Directive::FuseComputation { ids: list("ids")?, name: name() },
            "fuse_allreduce" => {
                Directive::FuseAllReduce { rs: s("rs")?, comps: list("comps")?, ag: s("ag")?, name: name() }
            }
            "fuse_send" => Directive::FuseSend { comp: s("comp")?, send: s("send")?, name: name() },
            "overlap" => Directive::Overlap { ids: list("ids")?, name: name() },
            "as_slice" => Directive::AsSlice { tensor: s("tensor")? },
            "dead" => Directive::Dead { id: s("id")? },
            other => return Err(format!("unknown directive kind {other}")),
        })
    }
}

impl fmt::Display for Directive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Directive::SplitArRsAg { target, .. } => write!(f, "split({target})"),
            Directive::ReorderAllGather { ag, comps, .. } => write!(f, "reorder({ag}; {})", comps.join(", ")),
            Directive::ReorderBroadcast { bc, comps, .. } => write!(f, "reorder({bc}; {})", comps.join(", ")),
            Directive::FuseComputation { ids, .. } => write!(f, "fuse({})", ids.join(", ")),
            Directive::FuseAllReduce { rs, comps, ag, .. } => {
                write!(f, "fuse_ar({rs}; {}; {ag})", comps.join(", "))
            }
            Directive::FuseSend { comp, send, .. } => write!(f, "fuse_send({comp}, {send})"),
            Directive::Overlap { ids, .. } => write!(f, "overlap({})", ids.join(", ")),
            Directive::AsSlice { tensor } => write!(f, "as_slice({tensor})"),
            Directive::Dead { id } => write!(f, "dead({id})"),
        }
    }
}

/// An ordered list of directives.
#[derive(Debug, Clone, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Schedule {
    pub directives: Vec<Directive>,
}

impl Schedule {
    pub fn new(directives: Vec<Directive>) -> Schedule {
        Schedule { directives }
    }

    pub fn to_json(&self) -> Value {
        json!({"directives": self.directives.iter().map(Directive::to_json).collect::<Vec<_>>()})
    }

    pub fn from_json(v: &Value) -> Result<Schedule, String> {
        let list = v.get("directives").and_then(Value::as_array).ok_or("schedule needs a 'directives' list")?;
        Ok(Schedule { directives: list.iter().map(Directive::from_json).collect::<Result<_, _>>()? })
    }

    pub fn from_str(text: &str) -> Result<Schedule, String> {
        let v: Value = serde_json::from_str(text).map_err(|e| format!("malformed JSON: {e}"))?;
        Schedule::from_json(&v)
    }

    /// Compact single-line rendering used for ordering and reports.
    pub fn key(&self) -> String {
        serde_json::to_string(&self.to_json()).expect("serializable")
    }
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.directives.is_empty() {
            return f.write_str("<base>");
        }
        let parts: Vec<String> = self.directives.iter().map(ToString::to_string).collect();
        f.write_str(&parts.join("; "))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_round_trip() {
        let s = Schedule::new(vec![
            Directive::SplitArRsAg { target: "sum".into(), names: vec!["rsSum".into(), "agSum".into()] },
            Directive::ReorderAllGather { ag: "agSum".into(), comps: vec!["d".into(), "out".into()], names: vec![] },
            Directive::FuseAllReduce { rs: "rsSum".into(), comps: vec!["sc_d".into()], ag: "ag_out".into(), name: None },
            Directive::AsSlice { tensor: "m".into() },
            Directive::Dead { id: "agM".into() },
        ]);
        let back = Schedule::from_json(&s.to_json()).unwrap();
        assert_eq!(back, s);
        assert!(Schedule::from_str(r#"{"directives":[{"kind":"nope","args":{}}]}"#).is_err());
    }
}
