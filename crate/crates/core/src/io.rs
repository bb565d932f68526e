//! Plain-text formats: TOML for environments, distributions, policies and
//! value tables; CSV for logs, credit rows and joint matrices; a delimited
//! format for binary least-squares instances.
//!
//! Floats are written in shortest round-trip form, so a load after a save
//! gives back the same bits. Loader errors name the offending key path, e.g.
//! `transition[1][3]`.
//!
//! Environment file:
//!
//! ```toml
//! agents = 2
//! states = 2
//! actions = 2
//! discount = 0.9
//! reward = [[0.0, 0.0, 0.0, 0.0], [1.0, 0.0, 0.0, 0.0]]      # [state][joint]
//! transition = [[[1.0, 0.0], ...], ...]                      # [state][joint][next]
//!
//! [[observations.agent]]        # optional, one table per agent
//! count = 4
//! obs = [[0, 1], [2, 3]]        # [state] -> emitted observations
//! prob = [[0.5, 0.5], [0.5, 0.5]]
//! ```

use std::fmt::Write as _;
use std::path::Path;

use toml::{Table, Value};

use crate::data_distribution::{JointDistribution, ProductPolicy};
use crate::env_model::{Environment, LatentMmdp, RichObservationLayer};
use crate::error::{Error, Result};
use crate::igm::JointQ;
use crate::lvf::{CreditRow, FactoredQ};

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn in_file(path: &Path, err: Error) -> Error {
    match err {
        Error::Parse { path: key, message } => Error::Parse {
            path: format!("{}: {key}", path.display()),
            message,
        },
        other => other,
    }
}

fn parse_table(text: &str) -> Result<Table> {
    text.parse::<Table>()
        .map_err(|e| Error::parse("<document>", e.message().to_string()))
}

fn field<'a>(t: &'a Table, key: &str, prefix: &str) -> Result<&'a Value> {
    t.get(key)
        .ok_or_else(|| Error::parse(join(prefix, key), "missing key"))
}

fn join(prefix: &str, key: &str) -> String {
    if prefix.is_empty() {
        key.to_string()
    } else {
        format!("{prefix}.{key}")
    }
}

fn as_usize(v: &Value, path: &str) -> Result<usize> {
    match v {
        Value::Integer(i) if *i >= 0 => Ok(*i as usize),
        _ => Err(Error::parse(path, format!("expected a non-negative integer, found {}", v.type_str()))),
    }
}

fn as_f64(v: &Value, path: &str) -> Result<f64> {
    match v {
        Value::Float(x) => Ok(*x),
        Value::Integer(i) => Ok(*i as f64),
        _ => Err(Error::parse(path, format!("expected a number, found {}", v.type_str()))),
    }
}

fn as_bool(v: &Value, path: &str) -> Result<bool> {
    v.as_bool()
        .ok_or_else(|| Error::parse(path, format!("expected a boolean, found {}", v.type_str())))
}

fn as_array<'a>(v: &'a Value, path: &str, len: Option<usize>) -> Result<&'a [Value]> {
    let arr = v
        .as_array()
        .ok_or_else(|| Error::parse(path, format!("expected an array, found {}", v.type_str())))?;
    if let Some(len) = len {
        if arr.len() != len {
            return Err(Error::parse(path, format!("expected {len} entries, found {}", arr.len())));
        }
    }
    Ok(arr)
}

fn vec_f64(v: &Value, path: &str, len: Option<usize>) -> Result<Vec<f64>> {
    as_array(v, path, len)?
        .iter()
        .enumerate()
        .map(|(i, x)| as_f64(x, &format!("{path}[{i}]")))
        .collect()
}

fn vec_usize(v: &Value, path: &str) -> Result<Vec<usize>> {
    as_array(v, path, None)?
        .iter()
        .enumerate()
        .map(|(i, x)| as_usize(x, &format!("{path}[{i}]")))
        .collect()
}

/// Row-major flattening of a `rows × cols` nested array.
fn matrix_f64(v: &Value, path: &str, rows: usize, cols: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(rows * cols);
    for (i, row) in as_array(v, path, Some(rows))?.iter().enumerate() {
        out.extend(vec_f64(row, &format!("{path}[{i}]"), Some(cols))?);
    }
    Ok(out)
}

fn check_kind(t: &Table, expected: &str) -> Result<()> {
    match t.get("kind") {
        None => Ok(()),
        Some(Value::String(k)) if k == expected => Ok(()),
        Some(v) => Err(Error::parse("kind", format!("expected \"{expected}\", found {v}"))),
    }
}

fn float_array(values: &[f64]) -> Value {
    Value::Array(values.iter().map(|&x| Value::Float(x)).collect())
}

fn nested(values: &[f64], width: usize) -> Value {
    Value::Array(values.chunks(width).map(float_array).collect())
}

fn render(table: Table) -> String {
    toml::to_string(&table).expect("tables of numbers always serialize")
}

pub fn environment_from_str(text: &str) -> Result<Environment> {
    let t = parse_table(text)?;
    check_kind(&t, "environment")?;
    let n = as_usize(field(&t, "agents", "")?, "agents")?;
    let s = as_usize(field(&t, "states", "")?, "states")?;
    let m = as_usize(field(&t, "actions", "")?, "actions")?;
    let gamma = as_f64(field(&t, "discount", "")?, "discount")?;
    let space = crate::env_model::JointActionSpace::new(n, m)?;
    let j = space.len();
    let reward = matrix_f64(field(&t, "reward", "")?, "reward", s, j)?;
    let mut transition = Vec::with_capacity(s * j * s);
    for (si, rows) in as_array(field(&t, "transition", "")?, "transition", Some(s))?
        .iter()
        .enumerate()
    {
        transition.extend(matrix_f64(rows, &format!("transition[{si}]"), j, s)?);
    }
    let mmdp = LatentMmdp::new(n, s, m, reward, transition, gamma)?;
    let obs = match t.get("observations") {
        None => RichObservationLayer::identity(n, s),
        Some(v) => observations_from_value(v, n, s)?,
    };
    Environment::new(mmdp, obs)
}

fn observations_from_value(v: &Value, n: usize, s: usize) -> Result<RichObservationLayer> {
    let table = v
        .as_table()
        .ok_or_else(|| Error::parse("observations", "expected a table"))?;
    let agents = as_array(field(table, "agent", "observations")?, "observations.agent", Some(n))?;
    let mut counts = Vec::with_capacity(n);
    let mut emission = Vec::with_capacity(n);
    for (a, entry) in agents.iter().enumerate() {
        let prefix = format!("observations.agent[{a}]");
        let at = entry
            .as_table()
            .ok_or_else(|| Error::parse(&prefix, "expected a table"))?;
        counts.push(as_usize(field(at, "count", &prefix)?, &join(&prefix, "count"))?);
        let obs = as_array(field(at, "obs", &prefix)?, &join(&prefix, "obs"), Some(s))?;
        let prob = as_array(field(at, "prob", &prefix)?, &join(&prefix, "prob"), Some(s))?;
        let mut per_state = Vec::with_capacity(s);
        for st in 0..s {
            let xs = vec_usize(&obs[st], &format!("{prefix}.obs[{st}]"))?;
            let ps = vec_f64(&prob[st], &format!("{prefix}.prob[{st}]"), Some(xs.len()))?;
            per_state.push(xs.into_iter().zip(ps).collect());
        }
        emission.push(per_state);
    }
    RichObservationLayer::new(s, counts, emission)
}

pub fn environment_to_string(env: &Environment) -> String {
    let mmdp = env.mmdp();
    let s = mmdp.num_states();
    let j = mmdp.num_joint_actions();
    let mut t = Table::new();
    t.insert("kind".into(), Value::String("environment".into()));
    t.insert("agents".into(), Value::Integer(mmdp.num_agents() as i64));
    t.insert("states".into(), Value::Integer(s as i64));
    t.insert("actions".into(), Value::Integer(mmdp.num_actions() as i64));
    t.insert("discount".into(), Value::Float(mmdp.discount()));
    t.insert("reward".into(), nested(mmdp.rewards(), j));
    t.insert(
        "transition".into(),
        Value::Array(mmdp.transitions().chunks(j * s).map(|block| nested(block, s)).collect()),
    );
    let layer = env.observation_layer();
    if !layer.is_identity() {
        let agents = (0..env.num_agents())
            .map(|a| {
                let mut at = Table::new();
                at.insert("count".into(), Value::Integer(layer.num_observations(a) as i64));
                let emissions: Vec<&[(usize, f64)]> = (0..s).map(|st| layer.emission(a, st)).collect();
                at.insert(
                    "obs".into(),
                    Value::Array(
                        emissions
                            .iter()
                            .map(|e| Value::Array(e.iter().map(|&(x, _)| Value::Integer(x as i64)).collect()))
                            .collect(),
                    ),
                );
                at.insert(
                    "prob".into(),
                    Value::Array(
                        emissions
                            .iter()
                            .map(|e| Value::Array(e.iter().map(|&(_, p)| Value::Float(p)).collect()))
                            .collect(),
                    ),
                );
                Value::Table(at)
            })
            .collect();
        let mut obs = Table::new();
        obs.insert("agent".into(), Value::Array(agents));
        t.insert("observations".into(), Value::Table(obs));
    }
    render(t)
}

pub fn load_environment(path: &Path) -> Result<Environment> {
    environment_from_str(&read(path)?).map_err(|e| in_file(path, e))
}

pub fn save_environment(env: &Environment, path: &Path) -> Result<()> {
    write(path, &environment_to_string(env))
}

/// `probs[context][joint]` plus the `factorized_origin` flag.
pub fn distribution_from_str(env: &Environment, text: &str) -> Result<JointDistribution> {
    let t = parse_table(text)?;
    check_kind(&t, "joint-distribution")?;
    let probs = matrix_f64(
        field(&t, "probs", "")?,
        "probs",
        env.num_contexts(),
        env.num_joint_actions(),
    )?;
    let origin = match t.get("factorized_origin") {
        Some(v) => as_bool(v, "factorized_origin")?,
        None => false,
    };
    JointDistribution::new(env, probs, origin)
}

pub fn distribution_to_string(dist: &JointDistribution) -> String {
    let mut t = Table::new();
    t.insert("kind".into(), Value::String("joint-distribution".into()));
    t.insert("factorized_origin".into(), Value::Boolean(dist.factorized_origin()));
    t.insert("probs".into(), nested(dist.table(), dist.num_joint_actions()));
    render(t)
}

pub fn load_distribution(env: &Environment, path: &Path) -> Result<JointDistribution> {
    distribution_from_str(env, &read(path)?).map_err(|e| in_file(path, e))
}

pub fn save_distribution(dist: &JointDistribution, path: &Path) -> Result<()> {
    write(path, &distribution_to_string(dist))
}

/// Per-agent tables of shape `[observation][action]`, under key `probs`
/// (product policies) or `values` (individual Q tables).
fn per_agent_tables(env: &Environment, t: &Table, key: &str) -> Result<Vec<Vec<f64>>> {
    let n = env.num_agents();
    let m = env.num_actions();
    as_array(field(t, key, "")?, key, Some(n))?
        .iter()
        .enumerate()
        .map(|(a, v)| matrix_f64(v, &format!("{key}[{a}]"), env.num_observations(a), m))
        .collect()
}

fn per_agent_value(tables: &[Vec<f64>], m: usize) -> Value {
    Value::Array(tables.iter().map(|tbl| nested(tbl, m)).collect())
}

pub fn product_policy_from_str(env: &Environment, text: &str) -> Result<ProductPolicy> {
    let t = parse_table(text)?;
    check_kind(&t, "product-policy")?;
    ProductPolicy::new(env, per_agent_tables(env, &t, "probs")?)
}

pub fn product_policy_to_string(policy: &ProductPolicy) -> String {
    let mut t = Table::new();
    t.insert("kind".into(), Value::String("product-policy".into()));
    let tables: Vec<Vec<f64>> = (0..policy.num_agents()).map(|a| policy.table(a).to_vec()).collect();
    t.insert("probs".into(), per_agent_value(&tables, policy.num_actions()));
    render(t)
}

pub fn load_product_policy(env: &Environment, path: &Path) -> Result<ProductPolicy> {
    product_policy_from_str(env, &read(path)?).map_err(|e| in_file(path, e))
}

pub fn factored_q_from_str(env: &Environment, text: &str) -> Result<FactoredQ> {
    let t = parse_table(text)?;
    check_kind(&t, "factored-q")?;
    FactoredQ::new(env, per_agent_tables(env, &t, "values")?)
}

pub fn factored_q_to_string(q: &FactoredQ) -> String {
    let mut t = Table::new();
    t.insert("kind".into(), Value::String("factored-q".into()));
    t.insert("values".into(), per_agent_value(q.tables(), q.num_actions()));
    render(t)
}

pub fn joint_q_from_str(env: &Environment, text: &str) -> Result<JointQ> {
    let t = parse_table(text)?;
    check_kind(&t, "joint-q")?;
    let values = matrix_f64(
        field(&t, "values", "")?,
        "values",
        env.num_contexts(),
        env.num_joint_actions(),
    )?;
    JointQ::new(env, values)
}

pub fn joint_q_to_string(q: &JointQ) -> String {
    let mut t = Table::new();
    t.insert("kind".into(), Value::String("joint-q".into()));
    let width = q.values().len() / q.num_contexts().max(1);
    t.insert("values".into(), nested(q.values(), width.max(1)));
    render(t)
}

/// Loads a value table of either kind, judged by its `kind` key.
pub fn load_value_table(env: &Environment, path: &Path) -> Result<crate::harness::ValueTable> {
    use crate::harness::ValueTable;
    let text = read(path)?;
    let t = parse_table(&text).map_err(|e| in_file(path, e))?;
    let parsed = match t.get("kind").and_then(Value::as_str) {
        Some("joint-q") => joint_q_from_str(env, &text).map(ValueTable::Joint),
        Some("factored-q") | None => factored_q_from_str(env, &text).map(ValueTable::Factored),
        Some(other) => Err(Error::parse("kind", format!("`{other}` is not a value table"))),
    };
    parsed.map_err(|e| in_file(path, e))
}

pub fn save_value_table(table: &crate::harness::ValueTable, path: &Path) -> Result<()> {
    use crate::harness::ValueTable;
    let text = match table {
        ValueTable::Factored(q) => factored_q_to_string(q),
        ValueTable::Joint(q) => joint_q_to_string(q),
    };
    write(path, &text)
}

pub const CREDIT_HEADER: &str = "agent,observation,action,evaluation,baseline,weight,residue,q_i";

pub fn credit_csv(rows: &[CreditRow]) -> String {
    let mut out = format!("{CREDIT_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
            r.agent, r.observation, r.action, r.terms.evaluation, r.terms.baseline, r.terms.weight, r.residue, r.q_i
        );
    }
    out
}

/// Two-agent joint table at one context laid out with rows for agent 2's
/// action and columns for agent 1's action, labels `A1, A2, ...`.
pub fn joint_matrix_csv(env: &Environment, values: &[f64], context: usize) -> Result<String> {
    if env.num_agents() != 2 {
        return Err(Error::param("agents", "the matrix layout needs exactly two agents"));
    }
    let m = env.num_actions();
    let j = env.num_joint_actions();
    let row = values
        .get(context * j..(context + 1) * j)
        .ok_or_else(|| Error::Shape(format!("no context {context} in the table")))?;
    let space = env.joint_actions();
    let mut out = String::from("a2\\a1");
    for a1 in 0..m {
        let _ = write!(out, ",A{}", a1 + 1);
    }
    out.push('\n');
    for a2 in 0..m {
        let _ = write!(out, "A{}", a2 + 1);
        for a1 in 0..m {
            let _ = write!(out, ",{:.16e}", row[space.encode(&[a1, a2])]);
        }
        out.push('\n');
    }
    Ok(out)
}

/// Binary least-squares instance: one `pattern,weight,target` line per row,
/// where `pattern` is a string of `0`/`1`. Blank lines and `#` comments are
/// skipped.
#[derive(Clone, Debug, PartialEq)]
pub struct LstsqInstance {
    pub rows: Vec<Vec<u8>>,
    pub weights: Vec<f64>,
    pub labels: Vec<f64>,
}

pub fn parse_lstsq(text: &str) -> Result<LstsqInstance> {
    let mut inst = LstsqInstance {
        rows: Vec::new(),
        weights: Vec::new(),
        labels: Vec::new(),
    };
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let here = format!("line {}", lineno + 1);
        let parts: Vec<&str> = line.split(',').map(str::trim).collect();
        let [pattern, weight, label] = parts[..] else {
            return Err(Error::parse(here, "expected `pattern,weight,target`"));
        };
        let row = pattern
            .chars()
            .map(|c| match c {
                '0' => Ok(0u8),
                '1' => Ok(1u8),
                _ => Err(Error::parse(&here, format!("pattern `{pattern}` is not binary"))),
            })
            .collect::<Result<Vec<u8>>>()?;
        let number = |s: &str, what: &str| {
            s.parse::<f64>()
                .map_err(|e| Error::parse(&here, format!("bad {what} `{s}`: {e}")))
        };
        inst.weights.push(number(weight, "weight")?);
        inst.labels.push(number(label, "target")?);
        inst.rows.push(row);
    }
    if inst.rows.is_empty() {
        return Err(Error::parse("<document>", "no rows"));
    }
    Ok(inst)
}

pub fn load_lstsq(path: &Path) -> Result<LstsqInstance> {
    parse_lstsq(&read(path)?).map_err(|e| in_file(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_distribution::uniform_distribution;
    use crate::env_model::{random_mmdp, random_observation_layer, two_state_env};

    #[test]
    fn environment_round_trip() {
        let env = Environment::from_mmdp(random_mmdp(3, 2, 3, 2, 0.95).unwrap()).unwrap();
        let text = environment_to_string(&env);
        let back = environment_from_str(&text).unwrap();
        assert_eq!(back, env);
        assert_eq!(environment_to_string(&back), text);
    }

    #[test]
    fn rich_environment_round_trip() {
        let mmdp = random_mmdp(4, 2, 2, 2, 0.5).unwrap();
        let obs = random_observation_layer(9, &mmdp, 3).unwrap();
        let env = Environment::new(mmdp, obs).unwrap();
        let back = environment_from_str(&environment_to_string(&env)).unwrap();
        assert_eq!(back, env);
    }

    #[test]
    fn errors_name_key_paths() {
        let env = Environment::from_mmdp(two_state_env(0.9)).unwrap();
        let text = environment_to_string(&env).replace("discount = 0.9", "discount = \"x\"");
        let err = environment_from_str(&text).unwrap_err().to_string();
        assert!(err.starts_with("discount:"), "{err}");
        let text = "agents = 2\nstates = 2\nactions = 2\ndiscount = 0.9\nreward = [[0, 0, 0, 0], [1, 0, 0]]\n";
        let err = environment_from_str(text).unwrap_err().to_string();
        assert!(err.starts_with("reward[1]:"), "{err}");
        let err = environment_from_str("agents = 2").unwrap_err().to_string();
        assert!(err.contains("states") && err.contains("missing"), "{err}");
    }

    #[test]
    fn distribution_round_trip() {
        let env = Environment::from_mmdp(two_state_env(0.9)).unwrap();
        let d = uniform_distribution(&env);
        let back = distribution_from_str(&env, &distribution_to_string(&d)).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn lstsq_parser() {
        let inst = parse_lstsq("# x\n01, 1.0, 2.5\n11,0.5,-1 # trailing\n\n").unwrap();
        assert_eq!(inst.rows, vec![vec![0, 1], vec![1, 1]]);
        assert_eq!(inst.labels, vec![2.5, -1.0]);
        assert!(parse_lstsq("012,1,1").is_err());
        assert!(parse_lstsq("01,1").unwrap_err().to_string().starts_with("line 1"));
    }

    #[test]
    fn matrix_layout() {
        let env = Environment::from_mmdp(crate::env_model::matrix_game_env()).unwrap();
        let csv = joint_matrix_csv(&env, env.mmdp().rewards(), 0).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "a2\\a1,A1,A2,A3");
        assert!(lines[1].starts_with("A1,8.0"));
        assert!(lines[2].starts_with("A2,-1.2"));
    }
}
