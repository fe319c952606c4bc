//! Parameter accounting per model component.

use serde::{Deserialize, Serialize};

use crate::backbone::ParamCount;
use crate::substrate::ParamStore;

pub const COMPONENTS: [&str; 5] = [
    "encoder",
    "semantic_adapter",
    "acoustic_adapter",
    "backbone",
    "low_rank",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentCount {
    pub component: String,
    pub total: u64,
    pub trainable: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamReport {
    pub components: Vec<ComponentCount>,
    pub overall: ParamCount,
}

/// Component a tensor name belongs to.
pub fn component_of(name: &str) -> &'static str {
    if name.ends_with(".lora_a") || name.ends_with(".lora_b") {
        "low_rank"
    } else if name.starts_with("encoder.") {
        "encoder"
    } else if name.starts_with("semantic.") {
        "semantic_adapter"
    } else if name.starts_with("acoustic.") {
        "acoustic_adapter"
    } else {
        "backbone"
    }
}

/// Builds a report from `(name, element count, frozen)` descriptors, so
/// sizes far beyond memory can be accounted without allocating tensors.
pub fn report_from_descriptors<'a, I>(tensors: I) -> ParamReport
where
    I: IntoIterator<Item = (&'a str, u64, bool)>,
{
    let mut components: Vec<ComponentCount> = COMPONENTS
        .iter()
        .map(|c| ComponentCount {
            component: c.to_string(),
            total: 0,
            trainable: 0,
        })
        .collect();
    for (name, numel, frozen) in tensors {
        let c = component_of(name);
        let slot = components
            .iter_mut()
            .find(|x| x.component == c)
            .expect("known component");
        slot.total += numel;
        if !frozen {
            slot.trainable += numel;
        }
    }
    let total = components.iter().map(|c| c.total).sum();
    let trainable = components.iter().map(|c| c.trainable).sum();
    ParamReport {
        components,
        overall: ParamCount::from_counts(trainable, total),
    }
}

pub fn param_report(params: &ParamStore) -> ParamReport {
    report_from_descriptors(
        params
            .iter()
            .map(|t| (t.name.as_str(), t.numel() as u64, t.frozen)),
    )
}
