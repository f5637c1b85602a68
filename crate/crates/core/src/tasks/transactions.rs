//! Multi-account transaction-log task: clean log synthesis, single-anomaly
//! injection, and the replay oracle that recovers the anomaly.

use crate::error::{Error, Result};
use crate::numeric::Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashSet};
use std::fmt;

/// Injectable anomaly taxonomy (plus the clean-log control).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BugType {
    #[serde(rename = "CALC_ERROR")]
    CalcError,
    #[serde(rename = "NEGATIVE_BAL")]
    NegativeBal,
    #[serde(rename = "LOST_UPDATE")]
    LostUpdate,
    #[serde(rename = "DUPLICATE_TXN")]
    DuplicateTxn,
    #[serde(rename = "NONE")]
    None,
}

impl BugType {
    pub const ALL_BUGS: [BugType; 4] = [
        BugType::CalcError,
        BugType::NegativeBal,
        BugType::LostUpdate,
        BugType::DuplicateTxn,
    ];

    pub fn canonical(&self) -> &'static str {
        match self {
            BugType::CalcError => "CALC_ERROR",
            BugType::NegativeBal => "NEGATIVE_BAL",
            BugType::LostUpdate => "LOST_UPDATE",
            BugType::DuplicateTxn => "DUPLICATE_TXN",
            BugType::None => "NONE",
        }
    }

    pub fn parse(s: &str) -> Option<BugType> {
        match s.to_ascii_uppercase().as_str() {
            "CALC_ERROR" => Some(BugType::CalcError),
            "NEGATIVE_BAL" => Some(BugType::NegativeBal),
            "LOST_UPDATE" => Some(BugType::LostUpdate),
            "DUPLICATE_TXN" => Some(BugType::DuplicateTxn),
            "NONE" => Some(BugType::None),
            _ => None,
        }
    }
}

impl fmt::Display for BugType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.canonical())
    }
}

/// One rendered transfer: the from-account is always listed first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferRecord {
    pub tx_id: usize,
    pub amount: i64,
    pub from: String,
    pub to: String,
    pub from_old: i64,
    pub from_new: i64,
    pub to_old: i64,
    pub to_new: i64,
}

impl TransferRecord {
    fn identity(&self) -> (i64, String, String, i64, i64) {
        (
            self.amount,
            self.from.clone(),
            self.to.clone(),
            self.from_old,
            self.to_old,
        )
    }

    pub fn render(&self) -> String {
        format!(
            "[TX{:03}]: Transfer ${}: {}={} → {}, {}={} → {}",
            self.tx_id,
            self.amount,
            self.from,
            self.from_old,
            self.from_new,
            self.to,
            self.to_old,
            self.to_new
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransactionTask {
    /// Initial balances, in account-name order.
    pub accounts: BTreeMap<String, i64>,
    pub ops: Vec<TransferRecord>,
    pub bug_type: BugType,
    pub bug_tx: Option<usize>,
    pub n_ops: usize,
}

impl TransactionTask {
    pub fn initial_total(&self) -> i64 {
        self.accounts.values().sum()
    }

    pub fn render_initial_state(&self) -> String {
        let mut parts: Vec<String> = self
            .accounts
            .iter()
            .map(|(name, bal)| format!("\"account_{name}\": {bal}"))
            .collect();
        parts.push(format!("\"total\": {}", self.initial_total()));
        format!("{{{}}}", parts.join(", "))
    }

    pub fn render_log(&self) -> String {
        self.ops
            .iter()
            .map(TransferRecord::render)
            .collect::<Vec<_>>()
            .join("\n")
    }

    /// The exact instance from the worked example: two accounts, five
    /// transfers, an over-debit at TX004.
    pub fn reference_instance() -> TransactionTask {
        let mut accounts = BTreeMap::new();
        accounts.insert("A".to_string(), 4000);
        accounts.insert("B".to_string(), 4200);
        let mk = |tx_id, amount, from: &str, to: &str, fo, fnw, to_old, tn| TransferRecord {
            tx_id,
            amount,
            from: from.into(),
            to: to.into(),
            from_old: fo,
            from_new: fnw,
            to_old,
            to_new: tn,
        };
        TransactionTask {
            accounts,
            ops: vec![
                mk(1, 107, "A", "B", 4000, 3893, 4200, 4307),
                mk(2, 204, "A", "B", 3893, 3689, 4307, 4511),
                mk(3, 780, "A", "B", 3689, 2909, 4511, 5291),
                mk(4, 2925, "A", "B", 2909, -16, 5291, 8216),
                mk(5, 699, "B", "A", 8216, 7517, -16, 683),
            ],
            bug_type: BugType::NegativeBal,
            bug_tx: Some(4),
            n_ops: 5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ViolatedRule {
    Conservation,
    NonNegative,
    Arithmetic,
    Duplicate,
    LostUpdate,
}

impl ViolatedRule {
    pub fn bug_type(&self) -> BugType {
        match self {
            ViolatedRule::Arithmetic => BugType::CalcError,
            ViolatedRule::NonNegative => BugType::NegativeBal,
            ViolatedRule::LostUpdate => BugType::LostUpdate,
            ViolatedRule::Duplicate => BugType::DuplicateTxn,
            // A bare conservation break has no injected counterpart; the
            // closest taxonomy entry is an arithmetic fault.
            ViolatedRule::Conservation => BugType::CalcError,
        }
    }
}

/// Replay verdict: the first violated rule and the transaction it occurred
/// at, or a clean bill.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub valid: bool,
    pub violated_rule: Option<ViolatedRule>,
    pub first_offender: Option<usize>,
}

impl Verdict {
    fn clean() -> Self {
        Verdict { valid: true, violated_rule: None, first_offender: None }
    }

    fn violation(rule: ViolatedRule, tx: usize) -> Self {
        Verdict { valid: false, violated_rule: Some(rule), first_offender: Some(tx) }
    }
}

/// Replay already-parsed records against the initial balances. Within each
/// transaction the rules are checked in a fixed priority order (arithmetic,
/// non-negative, duplicate, lost-update, conservation) so a single injected
/// anomaly is attributed to its own rule even when consequences cascade.
pub fn verify_records(initial: &BTreeMap<String, i64>, ops: &[TransferRecord]) -> Verdict {
    let total: i64 = initial.values().sum();
    let mut committed = initial.clone();
    let mut seen: HashSet<(i64, String, String, i64, i64)> = HashSet::new();

    for op in ops {
        if op.from_new != op.from_old - op.amount || op.to_new != op.to_old + op.amount {
            return Verdict::violation(ViolatedRule::Arithmetic, op.tx_id);
        }
        if op.from_old < 0 || op.from_new < 0 || op.to_old < 0 || op.to_new < 0 {
            return Verdict::violation(ViolatedRule::NonNegative, op.tx_id);
        }
        if seen.contains(&op.identity()) {
            return Verdict::violation(ViolatedRule::Duplicate, op.tx_id);
        }
        let stale_from = committed.get(&op.from).copied() != Some(op.from_old);
        let stale_to = committed.get(&op.to).copied() != Some(op.to_old);
        if stale_from || stale_to {
            return Verdict::violation(ViolatedRule::LostUpdate, op.tx_id);
        }
        seen.insert(op.identity());
        committed.insert(op.from.clone(), op.from_new);
        committed.insert(op.to.clone(), op.to_new);
        if committed.values().sum::<i64>() != total {
            return Verdict::violation(ViolatedRule::Conservation, op.tx_id);
        }
    }
    Verdict::clean()
}

/// Replay a task; goes through the rendered-text parser so the oracle
/// validates exactly what a reader of the log sees.
pub fn verify_transaction_log(task: &TransactionTask) -> Result<Verdict> {
    let initial = parse_initial_state(&task.render_initial_state())?;
    let ops = parse_log_text(&task.render_log())?;
    Ok(verify_records(&initial, &ops))
}

/// Parse `{"account_A": 4000, "account_B": 4200, "total": 8200}`.
pub fn parse_initial_state(text: &str) -> Result<BTreeMap<String, i64>> {
    let value: serde_json::Value = serde_json::from_str(text.trim())
        .map_err(|e| Error::Parse { line: 0, msg: format!("initial state: {e}") })?;
    let obj = value
        .as_object()
        .ok_or_else(|| Error::Parse { line: 0, msg: "initial state is not an object".into() })?;
    let mut out = BTreeMap::new();
    let mut stated_total = None;
    for (key, v) in obj {
        let n = v.as_i64().ok_or_else(|| Error::Parse {
            line: 0,
            msg: format!("balance {key} is not an integer"),
        })?;
        if key == "total" {
            stated_total = Some(n);
        } else if let Some(name) = key.strip_prefix("account_") {
            out.insert(name.to_string(), n);
        } else {
            return Err(Error::Parse { line: 0, msg: format!("unexpected key {key}") });
        }
    }
    if out.len() < 2 {
        return Err(Error::Parse { line: 0, msg: "need at least two accounts".into() });
    }
    if let Some(t) = stated_total {
        let sum: i64 = out.values().sum();
        if sum != t {
            return Err(Error::Parse {
                line: 0,
                msg: format!("stated total {t} != balance sum {sum}"),
            });
        }
    }
    Ok(out)
}

/// Parse one `[TXnnn]: Transfer $a: F=o → n, T=o → n` line. Whitespace
/// tolerant; accepts both the unicode arrow and `->`.
pub fn parse_log_line(line: &str, line_no: usize) -> Result<TransferRecord> {
    let fail = |msg: String| Error::Parse { line: line_no, msg };
    let s = line.trim();
    let rest = s
        .strip_prefix("[TX")
        .ok_or_else(|| fail("expected [TXnnn]: prefix".into()))?;
    let (id_str, rest) = rest
        .split_once("]:")
        .ok_or_else(|| fail("unterminated transaction id".into()))?;
    let tx_id: usize = id_str
        .trim()
        .parse()
        .map_err(|_| fail(format!("bad transaction id {id_str:?}")))?;
    let rest = rest.trim();
    let rest = rest
        .strip_prefix("Transfer")
        .ok_or_else(|| fail("expected Transfer keyword".into()))?;
    let rest = rest.trim_start();
    let rest = rest
        .strip_prefix('$')
        .ok_or_else(|| fail("expected $amount".into()))?;
    let (amount_str, rest) = rest
        .split_once(':')
        .ok_or_else(|| fail("expected : after amount".into()))?;
    let amount: i64 = amount_str
        .trim()
        .parse()
        .map_err(|_| fail(format!("bad amount {amount_str:?}")))?;

    let mut sides = Vec::new();
    for part in rest.split(',') {
        let part = part.trim();
        let (name, change) = part
            .split_once('=')
            .ok_or_else(|| fail(format!("bad balance clause {part:?}")))?;
        let arrow = if change.contains('→') { "→" } else { "->" };
        let (old_s, new_s) = change
            .split_once(arrow)
            .ok_or_else(|| fail(format!("missing arrow in {change:?}")))?;
        let old: i64 = old_s
            .trim()
            .parse()
            .map_err(|_| fail(format!("bad balance {old_s:?}")))?;
        let new: i64 = new_s
            .trim()
            .parse()
            .map_err(|_| fail(format!("bad balance {new_s:?}")))?;
        sides.push((name.trim().to_string(), old, new));
    }
    if sides.len() != 2 {
        return Err(fail(format!("expected 2 balance clauses, got {}", sides.len())));
    }
    Ok(TransferRecord {
        tx_id,
        amount,
        from: sides[0].0.clone(),
        to: sides[1].0.clone(),
        from_old: sides[0].1,
        from_new: sides[0].2,
        to_old: sides[1].1,
        to_new: sides[1].2,
    })
}

pub fn parse_log_text(text: &str) -> Result<Vec<TransferRecord>> {
    let mut ops = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        ops.push(parse_log_line(line, i + 1)?);
    }
    Ok(ops)
}

/// Keep every balance at least this far from zero in clean logs, so the
/// small perturbations an injection causes downstream can never create a
/// second anomaly.
const SLACK: i64 = 20;
const MAX_AMOUNT: i64 = 999;
const INNER_TRIES: usize = 400;
const OUTER_TRIES: usize = 16;

/// A generated task together with the clean transfer sequence underneath
/// it. Re-deriving balances over `clean_transfers` always yields a valid
/// log; the task differs from it by exactly the injected anomaly.
#[derive(Debug, Clone)]
pub struct GeneratedTransaction {
    pub task: TransactionTask,
    pub clean_transfers: Vec<(String, String, i64)>,
}

/// Chain balances over a transfer list with correct arithmetic.
pub fn rederive_chain(
    initial: &BTreeMap<String, i64>,
    transfers: &[(String, String, i64)],
) -> Vec<TransferRecord> {
    let mut state = initial.clone();
    transfers
        .iter()
        .enumerate()
        .map(|(i, (from, to, amount))| {
            let fo = state[from];
            let to_old = state[to];
            let rec = TransferRecord {
                tx_id: i + 1,
                amount: *amount,
                from: from.clone(),
                to: to.clone(),
                from_old: fo,
                from_new: fo - amount,
                to_old,
                to_new: to_old + amount,
            };
            state.insert(from.clone(), rec.from_new);
            state.insert(to.clone(), rec.to_new);
            rec
        })
        .collect()
}

fn account_names(n: usize) -> Vec<String> {
    (0..n).map(|i| ((b'A' + i as u8) as char).to_string()).collect()
}

struct GenState {
    names: Vec<String>,
    clean: BTreeMap<String, i64>,
    buggy: BTreeMap<String, i64>,
    seen_clean: HashSet<(i64, String, String, i64, i64)>,
    seen_buggy: HashSet<(i64, String, String, i64, i64)>,
    /// Committed-value history per account on the shared pre-injection
    /// chain, including the initial balance.
    history: BTreeMap<String, Vec<i64>>,
}

impl GenState {
    /// Draw a transfer feasible on both chains and free of identity
    /// collisions on either.
    fn draw_clean_op(&mut self, rng: &mut Rng) -> Result<(String, String, i64)> {
        for _ in 0..INNER_TRIES {
            let candidates: Vec<&String> = self
                .names
                .iter()
                .filter(|n| self.clean[*n].min(self.buggy[*n]) >= SLACK + 1)
                .collect();
            if candidates.is_empty() {
                break;
            }
            let from = candidates[rng.below(candidates.len() as u64) as usize].clone();
            let to = loop {
                let t = &self.names[rng.below(self.names.len() as u64) as usize];
                if *t != from {
                    break t.clone();
                }
            };
            let cap = self.clean[&from].min(self.buggy[&from]) - SLACK;
            let amount = rng.range_inclusive(1, cap.min(MAX_AMOUNT));
            let id_c = (amount, from.clone(), to.clone(), self.clean[&from], self.clean[&to]);
            let id_b = (amount, from.clone(), to.clone(), self.buggy[&from], self.buggy[&to]);
            if self.seen_clean.contains(&id_c) || self.seen_buggy.contains(&id_b) {
                continue;
            }
            return Ok((from, to, amount));
        }
        Err(Error::RetriesExhausted("no feasible transfer".into()))
    }

    fn advance_clean(&mut self, from: &str, to: &str, amount: i64) {
        let id = (
            amount,
            from.to_string(),
            to.to_string(),
            self.clean[from],
            self.clean[to],
        );
        self.seen_clean.insert(id);
        *self.clean.get_mut(from).unwrap() -= amount;
        *self.clean.get_mut(to).unwrap() += amount;
    }

    fn advance_buggy(&mut self, rec: &TransferRecord) {
        self.seen_buggy.insert(rec.identity());
        self.buggy.insert(rec.from.clone(), rec.from_new);
        self.buggy.insert(rec.to.clone(), rec.to_new);
    }
}

/// Generate a transaction task with exactly one injected anomaly (or none).
///
/// A clean log is grown transfer by transfer; the anomaly is injected at a
/// uniformly random position and downstream balances re-chain from the
/// corrupted state. Downstream transfers infeasible after the corruption
/// are redrawn under both the clean and corrupted chains, keeping the
/// underlying clean log valid. `wide` lifts the default 25..=500 bound on
/// `n_ops`.
pub fn gen_transaction_task(
    n_ops: usize,
    n_accounts: usize,
    bug: BugType,
    seed: u64,
    wide: bool,
) -> Result<GeneratedTransaction> {
    if !wide && !(25..=500).contains(&n_ops) {
        return Err(Error::Precondition(format!(
            "n_ops {n_ops} outside default range [25, 500] (pass wide to lift)"
        )));
    }
    if n_accounts < 2 || n_accounts > 26 {
        return Err(Error::Precondition(format!(
            "n_accounts {n_accounts} outside [2, 26]"
        )));
    }
    let min_ops = match bug {
        BugType::None => 1,
        BugType::LostUpdate | BugType::DuplicateTxn => 2,
        _ => 1,
    };
    if n_ops < min_ops {
        return Err(Error::Precondition(format!(
            "{bug} needs at least {min_ops} operations"
        )));
    }

    let mut rng = Rng::new(seed);
    let mut last_err = None;
    for _ in 0..OUTER_TRIES {
        match try_generate(n_ops, n_accounts, bug, &mut rng) {
            Ok(gen) => return Ok(gen),
            Err(e) => last_err = Some(e),
        }
    }
    Err(last_err.unwrap_or_else(|| Error::RetriesExhausted("generation failed".into())))
}

fn try_generate(
    n_ops: usize,
    n_accounts: usize,
    bug: BugType,
    rng: &mut Rng,
) -> Result<GeneratedTransaction> {
    let names = account_names(n_accounts);
    let mut initial = BTreeMap::new();
    for n in &names {
        initial.insert(n.clone(), rng.range_inclusive(1000, 9000));
    }

    // Positions are 1-based transaction ids.
    let n_clean = if bug == BugType::DuplicateTxn { n_ops - 1 } else { n_ops };
    let (dup_original, bug_pos) = match bug {
        BugType::None => (None, None),
        BugType::CalcError | BugType::NegativeBal => {
            (None, Some(rng.range_inclusive(1, n_clean as i64) as usize))
        }
        BugType::LostUpdate => (None, Some(rng.range_inclusive(2, n_clean as i64) as usize)),
        BugType::DuplicateTxn => {
            let orig = rng.range_inclusive(1, n_clean as i64) as usize;
            let pos = rng.range_inclusive(orig as i64 + 1, n_clean as i64 + 1) as usize;
            (Some(orig), Some(pos))
        }
    };

    let mut st = GenState {
        names: names.clone(),
        clean: initial.clone(),
        buggy: initial.clone(),
        seen_clean: HashSet::new(),
        seen_buggy: HashSet::new(),
        history: names
            .iter()
            .map(|n| (n.clone(), vec![initial[n]]))
            .collect(),
    };

    let mut clean_transfers: Vec<(String, String, i64)> = Vec::with_capacity(n_clean);
    let mut buggy_ops: Vec<TransferRecord> = Vec::with_capacity(n_ops);

    let mut next_tx_id = 1usize;
    for clean_idx in 1..=n_clean {
        // Insert the duplicate before generating the op that follows it.
        if bug == BugType::DuplicateTxn && bug_pos == Some(next_tx_id) {
            let mut dup = buggy_ops[dup_original.unwrap() - 1].clone();
            dup.tx_id = next_tx_id;
            st.advance_buggy(&dup);
            buggy_ops.push(dup);
            next_tx_id += 1;
        }

        let injected_here = bug_pos == Some(next_tx_id)
            && matches!(bug, BugType::CalcError | BugType::NegativeBal | BugType::LostUpdate);
        let _ = clean_idx;
        let (from, to, amount) = st.draw_clean_op(rng)?;
        clean_transfers.push((from.clone(), to.clone(), amount));

        let rec = if injected_here {
            // The clean chain still advances by the drawn transfer; only
            // the published record is corrupted or replaced.
            let rec = match bug {
                BugType::CalcError => {
                    inject_calc_error(&mut st, rng, next_tx_id, &from, &to, amount)
                }
                BugType::NegativeBal => inject_negative_bal(&mut st, rng, next_tx_id)?,
                BugType::LostUpdate => inject_lost_update(&mut st, rng, next_tx_id)?,
                _ => unreachable!(),
            };
            st.advance_clean(&from, &to, amount);
            st.advance_buggy(&rec);
            rec
        } else {
            let rec = TransferRecord {
                tx_id: next_tx_id,
                amount,
                from: from.clone(),
                to: to.clone(),
                from_old: st.buggy[&from],
                from_new: st.buggy[&from] - amount,
                to_old: st.buggy[&to],
                to_new: st.buggy[&to] + amount,
            };
            st.advance_clean(&from, &to, amount);
            st.advance_buggy(&rec);
            // Committed-value history feeds the stale-read construction;
            // only the shared pre-injection prefix matters.
            st.history.get_mut(&rec.from).unwrap().push(rec.from_new);
            st.history.get_mut(&rec.to).unwrap().push(rec.to_new);
            rec
        };

        buggy_ops.push(rec);
        next_tx_id += 1;
    }
    // Duplicate insertion at the very end of the log.
    if bug == BugType::DuplicateTxn && bug_pos == Some(next_tx_id) {
        let mut dup = buggy_ops[dup_original.unwrap() - 1].clone();
        dup.tx_id = next_tx_id;
        buggy_ops.push(dup);
    }

    debug_assert_eq!(buggy_ops.len(), n_ops);
    let task = TransactionTask {
        accounts: initial,
        ops: buggy_ops,
        bug_type: bug,
        bug_tx: bug_pos,
        n_ops,
    };
    let verdict = verify_records(&task.accounts, &task.ops);
    let want = match bug {
        BugType::None => Verdict::clean(),
        _ => Verdict {
            valid: false,
            violated_rule: Some(match bug {
                BugType::CalcError => ViolatedRule::Arithmetic,
                BugType::NegativeBal => ViolatedRule::NonNegative,
                BugType::LostUpdate => ViolatedRule::LostUpdate,
                BugType::DuplicateTxn => ViolatedRule::Duplicate,
                BugType::None => unreachable!(),
            }),
            first_offender: bug_pos,
        },
    };
    if verdict != want {
        return Err(Error::RetriesExhausted(format!(
            "generated log verifies as {verdict:?}, wanted {want:?}"
        )));
    }
    Ok(GeneratedTransaction { task, clean_transfers })
}

/// Reported balance off by a small nonzero delta on one side; everything
/// downstream chains from the wrong value. The (from, to, amount) triple is
/// the clean transfer at this position, so the record identity was already
/// vetted by `draw_clean_op`.
fn inject_calc_error(
    st: &mut GenState,
    rng: &mut Rng,
    tx_id: usize,
    from: &str,
    to: &str,
    amount: i64,
) -> TransferRecord {
    let mut delta = rng.range_inclusive(-9, 9);
    if delta == 0 {
        delta = 1;
    }
    let corrupt_from = rng.below(2) == 0;
    let mut rec = TransferRecord {
        tx_id,
        amount,
        from: from.to_string(),
        to: to.to_string(),
        from_old: st.buggy[from],
        from_new: st.buggy[from] - amount,
        to_old: st.buggy[to],
        to_new: st.buggy[to] + amount,
    };
    if corrupt_from {
        rec.from_new += delta;
    } else {
        rec.to_new += delta;
    }
    debug_assert!(rec.from_new >= 0 && rec.to_new >= 0);
    rec
}

/// Over-debit: amount exceeds the from-balance, arithmetic stays correct,
/// the account goes negative.
fn inject_negative_bal(st: &mut GenState, rng: &mut Rng, tx_id: usize) -> Result<TransferRecord> {
    for _ in 0..INNER_TRIES {
        let from = st.names[rng.below(st.names.len() as u64) as usize].clone();
        let to = loop {
            let t = &st.names[rng.below(st.names.len() as u64) as usize];
            if *t != from {
                break t.clone();
            }
        };
        let bal = st.buggy[&from];
        if bal < 0 {
            continue;
        }
        let amount = bal + rng.range_inclusive(1, 200);
        let rec = TransferRecord {
            tx_id,
            amount,
            from: from.clone(),
            to: to.clone(),
            from_old: bal,
            from_new: bal - amount,
            to_old: st.buggy[&to],
            to_new: st.buggy[&to] + amount,
        };
        if st.seen_buggy.contains(&rec.identity()) {
            continue;
        }
        return Ok(rec);
    }
    Err(Error::RetriesExhausted("negative-balance injection".into()))
}

/// Stale read: the from-account's reported old balance is its value from
/// before the most recent committed write.
fn inject_lost_update(st: &mut GenState, rng: &mut Rng, tx_id: usize) -> Result<TransferRecord> {
    for _ in 0..INNER_TRIES {
        let candidates: Vec<String> = st
            .names
            .iter()
            .filter(|n| {
                let h = &st.history[*n];
                h.len() >= 2
                    && h[h.len() - 2] != h[h.len() - 1]
                    && h[h.len() - 2] >= SLACK + 1
            })
            .cloned()
            .collect();
        if candidates.is_empty() {
            return Err(Error::RetriesExhausted(
                "no account with a rewritable committed value".into(),
            ));
        }
        let from = candidates[rng.below(candidates.len() as u64) as usize].clone();
        let to = loop {
            let t = &st.names[rng.below(st.names.len() as u64) as usize];
            if *t != from {
                break t.clone();
            }
        };
        let h = &st.history[&from];
        let stale = h[h.len() - 2];
        let amount = rng.range_inclusive(1, (stale - SLACK).min(MAX_AMOUNT));
        let to_old = st.buggy[&to];
        let rec = TransferRecord {
            tx_id,
            amount,
            from,
            to,
            from_old: stale,
            from_new: stale - amount,
            to_old,
            to_new: to_old + amount,
        };
        if st.seen_buggy.contains(&rec.identity()) {
            continue;
        }
        return Ok(rec);
    }
    Err(Error::RetriesExhausted("lost-update injection".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_instance_renders_and_verifies() {
        let task = TransactionTask::reference_instance();
        assert_eq!(
            task.render_initial_state(),
            "{\"account_A\": 4000, \"account_B\": 4200, \"total\": 8200}"
        );
        let log = task.render_log();
        assert!(log.contains("[TX001]: Transfer $107: A=4000 → 3893, B=4200 → 4307"));
        assert!(log.contains("[TX004]: Transfer $2925: A=2909 → -16, B=5291 → 8216"));
        let verdict = verify_transaction_log(&task).unwrap();
        assert_eq!(
            verdict,
            Verdict {
                valid: false,
                violated_rule: Some(ViolatedRule::NonNegative),
                first_offender: Some(4),
            }
        );
        assert_eq!(verdict.violated_rule.unwrap().bug_type(), BugType::NegativeBal);
    }

    #[test]
    fn clean_generated_log_is_valid_with_conserved_prefixes() {
        for seed in 0..20 {
            let t = gen_transaction_task(30, 3, BugType::None, seed, false).unwrap();
            let verdict = verify_transaction_log(&t.task).unwrap();
            assert!(verdict.valid, "seed {seed}: {verdict:?}");
            // Conservation at every prefix.
            let total = t.task.initial_total();
            let mut state = t.task.accounts.clone();
            for op in &t.task.ops {
                state.insert(op.from.clone(), op.from_new);
                state.insert(op.to.clone(), op.to_new);
                assert_eq!(state.values().sum::<i64>(), total);
            }
        }
    }

    #[test]
    fn every_bug_type_round_trips() {
        for &bug in &BugType::ALL_BUGS {
            for seed in 0..50 {
                let t = gen_transaction_task(25, 3, bug, seed, false).unwrap();
                let verdict = verify_transaction_log(&t.task).unwrap();
                assert!(!verdict.valid);
                assert_eq!(verdict.violated_rule.unwrap().bug_type(), bug, "seed {seed}");
                assert_eq!(verdict.first_offender, t.task.bug_tx, "seed {seed}");
            }
        }
    }

    #[test]
    fn injection_is_removable() {
        // Re-deriving balances over the recorded clean transfers yields a
        // valid log for every bug type.
        for &bug in &BugType::ALL_BUGS {
            for seed in 100..120 {
                let t = gen_transaction_task(30, 3, bug, seed, false).unwrap();
                let clean = rederive_chain(&t.task.accounts, &t.clean_transfers);
                let verdict = verify_records(&t.task.accounts, &clean);
                assert!(verdict.valid, "{bug} seed {seed}: {verdict:?}");
            }
        }
    }

    #[test]
    fn hand_built_calc_error_detected() {
        let mut task = TransactionTask::reference_instance();
        // Repair TX004/TX005 into a clean chain first.
        task.ops[3] = TransferRecord {
            tx_id: 4,
            amount: 100,
            from: "A".into(),
            to: "B".into(),
            from_old: 2909,
            from_new: 2809,
            to_old: 5291,
            to_new: 5391,
        };
        task.ops[4] = TransferRecord {
            tx_id: 5,
            amount: 50,
            from: "B".into(),
            to: "A".into(),
            from_old: 5391,
            from_new: 5341,
            to_old: 2809,
            to_new: 2859,
        };
        assert!(verify_transaction_log(&task).unwrap().valid);
        // new = old - amount + 1 on the from side of TX002.
        task.ops[1].from_new += 1;
        // Downstream must chain from the corrupted value to isolate the bug.
        task.ops[2].from_old += 1;
        task.ops[2].from_new += 1;
        task.ops[3].from_old += 1;
        task.ops[3].from_new += 1;
        task.ops[4].to_old += 1;
        task.ops[4].to_new += 1;
        let verdict = verify_transaction_log(&task).unwrap();
        assert_eq!(verdict.violated_rule, Some(ViolatedRule::Arithmetic));
        assert_eq!(verdict.first_offender, Some(2));
    }

    #[test]
    fn parse_rejects_malformed_line_with_line_number() {
        let err = parse_log_text("[TX001]: Transfer $10: A=5 → -5, B=1 → 11\nnot a line").unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn parser_accepts_ascii_arrow_and_loose_spacing() {
        let rec = parse_log_line("  [TX007]:   Transfer $42:  A=100 -> 58 ,  B=1 ->  43 ", 1).unwrap();
        assert_eq!(rec.tx_id, 7);
        assert_eq!(rec.amount, 42);
        assert_eq!(rec.from, "A");
        assert_eq!(rec.to_new, 43);
    }

    #[test]
    fn n_ops_range_enforced_unless_wide() {
        assert!(gen_transaction_task(10, 2, BugType::None, 0, false).is_err());
        assert!(gen_transaction_task(10, 2, BugType::None, 0, true).is_ok());
        assert!(gen_transaction_task(501, 2, BugType::None, 0, false).is_err());
    }

    #[test]
    fn generation_is_deterministic() {
        let a = gen_transaction_task(25, 3, BugType::LostUpdate, 9, false).unwrap();
        let b = gen_transaction_task(25, 3, BugType::LostUpdate, 9, false).unwrap();
        assert_eq!(a.task, b.task);
        assert_eq!(a.clean_transfers, b.clean_transfers);
    }
}
