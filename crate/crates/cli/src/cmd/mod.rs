pub mod attn;
pub mod eval;
pub mod mask;
pub mod pretrain;
pub mod probe;
pub mod synth;
