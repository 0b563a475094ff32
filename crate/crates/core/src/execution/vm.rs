// SPDX-License-Identifier: Apache-2.0

//! Deterministic toy VM. Balances live at `acct/<u64 BE>`, free registers at
//! `reg/<key>`.

use serde::Serialize;

use super::merkle::ExecutionState;
use crate::crypto::{hash_parts, Digest};
use crate::transaction::{Op, Script, SignedTransaction};

/// Cost charged for a script that does not parse.
pub const MALFORMED_COST: u64 = 1;

pub fn account_key(account: u64) -> Vec<u8> {
    let mut k = b"acct/".to_vec();
    k.extend_from_slice(&account.to_be_bytes());
    k
}

pub fn register_key(key: &[u8]) -> Vec<u8> {
    let mut k = b"reg/".to_vec();
    k.extend_from_slice(key);
    k
}

pub fn balance(state: &ExecutionState, account: u64) -> Option<u64> {
    state.get(&account_key(account)).map(|v| u64::from_be_bytes(v.try_into().expect("8-byte balance")))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TxStatus {
    Ok,
    Malformed,
    AccountExists,
    UnknownAccount,
    Unauthorized,
    InsufficientBalance,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TxOutcome {
    pub cost: u64,
    /// `hash("trace", start root || tx hash || end root)`.
    pub trace: Digest,
    pub status: TxStatus,
}

fn run_ops(state: &mut ExecutionState, script: &Script, signers: &[u64]) -> TxStatus {
    for o in &script.ops {
        match &o.op {
            Op::CreateAccount { account, balance: initial } => {
                let k = account_key(*account);
                if state.get(&k).is_some() {
                    return TxStatus::AccountExists;
                }
                state.set(k, initial.to_be_bytes().to_vec());
            }
            Op::Transfer { from, to, amount } => {
                if !signers.contains(from) {
                    return TxStatus::Unauthorized;
                }
                let (Some(fb), Some(_)) = (balance(state, *from), balance(state, *to)) else {
                    return TxStatus::UnknownAccount;
                };
                if fb < *amount {
                    return TxStatus::InsufficientBalance;
                }
                state.set(account_key(*from), (fb - amount).to_be_bytes().to_vec());
                let tb = balance(state, *to).expect("checked");
                state.set(account_key(*to), tb.saturating_add(*amount).to_be_bytes().to_vec());
            }
            Op::SetRegister { key, value } => state.set(register_key(key), value.clone()),
        }
    }
    TxStatus::Ok
}

/// `execute(Λ, t)`: a failing script consumes its declared cost and leaves
/// the registers untouched.
pub fn execute(state: &mut ExecutionState, tx: &SignedTransaction) -> TxOutcome {
    let start = state.commitment();
    let (cost, status) = match Script::parse(&tx.script) {
        Err(_) => (MALFORMED_COST, TxStatus::Malformed),
        Ok(script) => {
            let signers: Vec<u64> = tx.signer_accounts().collect();
            let mut scratch = state.clone();
            let status = run_ops(&mut scratch, &script, &signers);
            if status == TxStatus::Ok {
                *state = scratch;
            }
            (script.total_cost(), status)
        }
    };
    let end = state.commitment();
    let trace = hash_parts(b"trace", &[start.as_bytes(), tx.hash().as_bytes(), end.as_bytes()]);
    TxOutcome { cost, trace, status }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::StakingKeyPair;
    use crate::transaction::ScriptOp;

    fn tx(kp: &StakingKeyPair, ops: Vec<ScriptOp>) -> SignedTransaction {
        SignedTransaction::sign(&Script::new(ops), Digest::ZERO, kp, &[kp])
    }

    #[test]
    fn transfer_semantics() {
        let alice = StakingKeyPair::from_seed(b"alice");
        let a = alice.public().0;
        let mut s = ExecutionState::new();
        let setup = tx(&alice, vec![
            ScriptOp { op: Op::CreateAccount { account: a, balance: 50 }, cost: 1 },
            ScriptOp { op: Op::CreateAccount { account: 2, balance: 0 }, cost: 1 },
        ]);
        assert_eq!(execute(&mut s, &setup).status, TxStatus::Ok);

        let pay = tx(&alice, vec![ScriptOp { op: Op::Transfer { from: a, to: 2, amount: 10 }, cost: 4 }]);
        let out = execute(&mut s, &pay);
        assert_eq!((out.status, out.cost), (TxStatus::Ok, 4));
        assert_eq!((balance(&s, a), balance(&s, 2)), (Some(40), Some(10)));

        let before = s.clone();
        let over = tx(&alice, vec![ScriptOp { op: Op::Transfer { from: a, to: 2, amount: 41 }, cost: 6 }]);
        let out = execute(&mut s, &over);
        assert_eq!((out.status, out.cost), (TxStatus::InsufficientBalance, 6));
        assert_eq!(s, before);
    }

    #[test]
    fn transfer_needs_owner_signature() {
        let mallory = StakingKeyPair::from_seed(b"mallory");
        let mut s = ExecutionState::new();
        s.set(account_key(7), 100u64.to_be_bytes().to_vec());
        s.set(account_key(8), 0u64.to_be_bytes().to_vec());
        let steal = tx(&mallory, vec![ScriptOp { op: Op::Transfer { from: 7, to: 8, amount: 1 }, cost: 1 }]);
        assert_eq!(execute(&mut s, &steal).status, TxStatus::Unauthorized);
    }

    #[test]
    fn partial_failure_is_atomic() {
        let kp = StakingKeyPair::from_seed(b"k");
        let mut s = ExecutionState::new();
        let t = tx(&kp, vec![
            ScriptOp { op: Op::SetRegister { key: b"x".to_vec(), value: b"1".to_vec() }, cost: 2 },
            ScriptOp { op: Op::Transfer { from: kp.public().0, to: 1, amount: 1 }, cost: 3 },
        ]);
        let out = execute(&mut s, &t);
        assert_eq!((out.status, out.cost), (TxStatus::UnknownAccount, 5));
        assert!(s.is_empty());
    }

    #[test]
    fn malformed_costs_minimum() {
        let kp = StakingKeyPair::from_seed(b"k");
        let mut t = tx(&kp, vec![ScriptOp { op: Op::SetRegister { key: vec![], value: vec![] }, cost: 9 }]);
        t.script.truncate(3);
        let mut s = ExecutionState::new();
        let out = execute(&mut s, &t);
        assert_eq!((out.status, out.cost), (TxStatus::Malformed, MALFORMED_COST));
    }

    #[test]
    fn deterministic() {
        let kp = StakingKeyPair::from_seed(b"k");
        let t = tx(&kp, vec![ScriptOp { op: Op::SetRegister { key: b"a".to_vec(), value: b"b".to_vec() }, cost: 2 }]);
        let (mut s1, mut s2) = (ExecutionState::new(), ExecutionState::new());
        assert_eq!(execute(&mut s1, &t), execute(&mut s2, &t));
        assert_eq!(s1.commitment(), s2.commitment());
    }
}
