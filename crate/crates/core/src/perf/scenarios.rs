//! Built-in large-model configurations for lifespan and bandwidth projection.
//!
//! Four GPT-style models from 145B to 1T parameters, each laid out two ways:
//! Megatron-style 3D parallelism (TP 8 with sequence parallelism, deep
//! pipelines, many micro-batches) and ZeRO-3 pure data parallelism. The GPU
//! counts and global batch sizes follow the published Megatron scaling runs.

use serde::{Deserialize, Serialize};

use super::ScenarioInputs;
use crate::activation::ActivationProfile;
use crate::config::{HardwareConfig, ModelConfig, ModelFamily, ParallelismConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub inputs: ScenarioInputs,
}

struct GptRow {
    name: &'static str,
    hidden: u64,
    layers: u64,
    heads: u64,
    pp: u64,
    gpus: u64,
    global_batch: u64,
}

const ROWS: [GptRow; 4] = [
    GptRow {
        name: "gpt-145b",
        hidden: 12288,
        layers: 80,
        heads: 96,
        pp: 8,
        gpus: 1536,
        global_batch: 2304,
    },
    GptRow {
        name: "gpt-310b",
        hidden: 16384,
        layers: 96,
        heads: 128,
        pp: 16,
        gpus: 1920,
        global_batch: 2160,
    },
    GptRow {
        name: "gpt-530b",
        hidden: 20480,
        layers: 105,
        heads: 128,
        pp: 35,
        gpus: 2520,
        global_batch: 2520,
    },
    GptRow {
        name: "gpt-1t",
        hidden: 25600,
        layers: 128,
        heads: 160,
        pp: 64,
        gpus: 3072,
        global_batch: 3072,
    },
];

const MICRO_BATCH: u64 = 8;
const TP: u64 = 8;

fn gpt(row: &GptRow) -> ModelConfig {
    ModelConfig {
        family: ModelFamily::DecoderOnly,
        hidden_dim: row.hidden,
        num_layers: row.layers,
        num_heads: row.heads,
        head_dim: row.hidden / row.heads,
        seq_len: 2048,
        micro_batch: MICRO_BATCH,
        vocab_size: 51200,
        bytes_per_element: 2,
    }
}

pub fn projection_scenarios(hw: &HardwareConfig) -> Vec<Scenario> {
    let mut out = Vec::new();
    for row in &ROWS {
        let dp = row.gpus / (TP * row.pp);
        out.push(Scenario {
            name: format!("{}-megatron", row.name),
            inputs: ScenarioInputs {
                model: gpt(row),
                parallelism: ParallelismConfig {
                    tp_degree: TP,
                    pp_degree: row.pp,
                    dp_degree: dp,
                    zero_stage: 1,
                    num_microbatches: row.global_batch / (dp * MICRO_BATCH),
                },
                profile: ActivationProfile::sequence_parallel(),
                hardware: hw.clone(),
            },
        });
    }
    for row in &ROWS {
        out.push(Scenario {
            name: format!("{}-zero3", row.name),
            inputs: ScenarioInputs {
                model: gpt(row),
                parallelism: ParallelismConfig {
                    tp_degree: 1,
                    pp_degree: 1,
                    dp_degree: row.gpus,
                    zero_stage: 3,
                    num_microbatches: 1,
                },
                profile: ActivationProfile::default(),
                hardware: hw.clone(),
            },
        });
    }
    out
}
