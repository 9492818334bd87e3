//! Kernel export, FLOP estimation and behavioral probes.

mod flops;
mod kernels;
mod probes;

pub use flops::{flop_estimate, flop_estimate_with, flops_csv, Component, FlopConvention, FlopReport};
pub use kernels::{dump_kernels, min_max_abs, KernelDump, KernelEntry, CROP, CROP_WIDTH};
pub use probes::{
    first_layer_forward_branch, probe_attention_routing, probe_causality, probe_length_extension,
    probe_model_causality, probe_static_routing, ssm_routing_matrix, CausalityReport,
    ExtensionReport, StaticRoutingReport, LEAK_THRESHOLD,
};
