//! Policy optimization: supervised fine-tuning and PPO.

pub mod ppo;
pub mod sft;
