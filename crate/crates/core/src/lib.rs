// SPDX-License-Identifier: Apache-2.0

pub mod codec;
pub mod crypto;
pub mod state;
pub mod clustering;
pub mod execution;
pub mod transaction;
pub mod hotstuff;
pub mod collection;
pub mod verification;
pub mod block;
pub mod scenario;
pub mod sim;
