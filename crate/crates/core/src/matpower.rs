//! Reader and writer for the subset of the MATPOWER case format used here.
//!
//! Recognized statements are `mpc.baseMVA = <num>;` and the matrix blocks
//! `mpc.bus`, `mpc.branch`, `mpc.gen`, `mpc.gencost`. Anything else (function
//! header, `mpc.version`, other blocks, `%` comments) is skipped.
//!
//! Columns read (1-based): bus 1 `BUS_I`, 3 `PD`; branch 1 `F_BUS`, 2 `T_BUS`,
//! 4 `BR_X`, 6 `RATE_A`, 11 `BR_STATUS`; gen 1 `GEN_BUS`, 9 `PMAX`, 10 `PMIN`;
//! gencost 1 `MODEL` (must be 2), 4 `NCOST` (2 or 3) followed by coefficients,
//! highest degree first.

use std::collections::HashMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::grid::{Bus, Generator, Grid, Line, QuadCost};

#[derive(Debug, Clone)]
pub struct ParseOptions {
    /// Label of the reduction bus; defaults to the highest-index bus.
    pub slack_label: Option<u64>,
    /// Safety parameter assigned to every line.
    pub line_nu: f64,
    /// Safety parameter assigned to every generator.
    pub gen_nu: f64,
    /// `RATE_A = 0` becomes `unlimited_factor * total load`.
    pub unlimited_factor: f64,
}

impl Default for ParseOptions {
    fn default() -> Self {
        ParseOptions {
            slack_label: None,
            line_nu: 3.0,
            gen_nu: 3.0,
            unlimited_factor: 100.0,
        }
    }
}

pub fn parse_matpower(text: &str) -> Result<Grid> {
    parse_matpower_with(text, &ParseOptions::default())
}

struct Block {
    name: String,
    rows: Vec<Vec<f64>>,
}

fn strip_comment(line: &str) -> &str {
    match line.find('%') {
        Some(i) => &line[..i],
        None => line,
    }
}

/// Splits the text into `mpc.<name> = [...]` blocks and scalar assignments.
fn scan(text: &str) -> Result<(Option<f64>, Vec<Block>)> {
    let mut base_mva = None;
    let mut blocks = Vec::new();
    let mut lines = text.lines().enumerate().peekable();

    while let Some((lineno, raw)) = lines.next() {
        let line = strip_comment(raw).trim();
        let Some(rest) = line.strip_prefix("mpc.") else {
            continue;
        };
        let Some((name, rhs)) = rest.split_once('=') else {
            continue;
        };
        let name = name.trim().to_string();
        let rhs = rhs.trim();

        if let Some(body) = rhs.strip_prefix('[') {
            let mut content = String::new();
            let mut closed = false;
            let push_part = |part: &str, content: &mut String| -> bool {
                if let Some(end) = part.find(']') {
                    content.push_str(&part[..end]);
                    true
                } else {
                    content.push_str(part);
                    content.push('\n');
                    false
                }
            };
            if push_part(body, &mut content) {
                closed = true;
            }
            while !closed {
                let Some((_, raw)) = lines.next() else {
                    return Err(Error::parse(
                        format!("mpc.{name} (line {})", lineno + 1),
                        "matrix block is not terminated by ']'",
                    ));
                };
                if push_part(strip_comment(raw), &mut content) {
                    closed = true;
                }
            }
            let mut rows = Vec::new();
            for chunk in content.split(';') {
                for row_text in chunk.lines() {
                    let row_text = row_text.trim();
                    if row_text.is_empty() {
                        continue;
                    }
                    let row = row_text
                        .split(|c: char| c.is_whitespace() || c == ',')
                        .filter(|t| !t.is_empty())
                        .map(|t| {
                            t.parse::<f64>().map_err(|_| {
                                Error::parse(
                                    format!("mpc.{name} row {}", rows.len() + 1),
                                    format!("'{t}' is not a number"),
                                )
                            })
                        })
                        .collect::<Result<Vec<f64>>>()?;
                    rows.push(row);
                }
            }
            if let Some(first) = rows.first() {
                let width = first.len();
                if let Some(bad) = rows.iter().position(|r| r.len() != width) {
                    return Err(Error::parse(
                        format!("mpc.{name} row {}", bad + 1),
                        format!("expected {width} columns, found {}", rows[bad].len()),
                    ));
                }
            }
            blocks.push(Block { name, rows });
        } else if name == "baseMVA" {
            let value = rhs.trim_end_matches(';').trim();
            let v = value
                .parse::<f64>()
                .map_err(|_| Error::parse("mpc.baseMVA", format!("'{value}' is not a number")))?;
            base_mva = Some(v);
        } else if rhs.starts_with('{') && !rhs.contains('}') {
            // cell arrays (bus names etc.) may span several lines
            for (_, raw) in lines.by_ref() {
                if strip_comment(raw).contains('}') {
                    break;
                }
            }
        }
    }
    Ok((base_mva, blocks))
}

fn require_columns(block: &Block, min: usize) -> Result<()> {
    match block.rows.first() {
        Some(r) if r.len() < min => Err(Error::parse(
            format!("mpc.{}", block.name),
            format!("at least {min} columns required, found {}", r.len()),
        )),
        _ => Ok(()),
    }
}

fn as_label(value: f64, context: &str) -> Result<u64> {
    if value >= 0.0 && value.fract() == 0.0 {
        Ok(value as u64)
    } else {
        Err(Error::parse(
            context,
            format!("bus number {value} is not a non-negative integer"),
        ))
    }
}

pub fn parse_matpower_with(text: &str, opts: &ParseOptions) -> Result<Grid> {
    let (base_mva, blocks) = scan(text)?;
    let find = |name: &str| blocks.iter().find(|b| b.name == name);

    let bus_block = find("bus").ok_or_else(|| Error::parse("case", "missing mpc.bus block"))?;
    let branch_block =
        find("branch").ok_or_else(|| Error::parse("case", "missing mpc.branch block"))?;
    let gen_block = find("gen");
    let cost_block = find("gencost");

    require_columns(bus_block, 3)?;
    require_columns(branch_block, 4)?;

    let mut buses = Vec::with_capacity(bus_block.rows.len());
    let mut by_label = HashMap::new();
    for (i, row) in bus_block.rows.iter().enumerate() {
        let label = as_label(row[0], "mpc.bus")?;
        if by_label.insert(label, i).is_some() {
            return Err(Error::parse(
                "mpc.bus",
                format!("bus {label} defined twice"),
            ));
        }
        buses.push(Bus {
            id: i,
            label,
            load: row[2],
        });
    }
    let lookup = |v: f64, ctx: &str| -> Result<usize> {
        let label = as_label(v, ctx)?;
        by_label
            .get(&label)
            .copied()
            .ok_or(Error::UnknownBus(label))
    };

    let total_load: f64 = buses.iter().map(|b| b.load).sum();
    let big_limit = opts.unlimited_factor * total_load.abs().max(1.0);

    let mut lines = Vec::new();
    for row in &branch_block.rows {
        let status = row.get(10).copied().unwrap_or(1.0);
        if status == 0.0 {
            continue;
        }
        let from = lookup(row[0], "mpc.branch")?;
        let to = lookup(row[1], "mpc.branch")?;
        let x = row[3];
        if !(x > 0.0) {
            return Err(Error::parse(
                "mpc.branch",
                format!(
                    "branch {}-{} has non-positive reactance {x}",
                    buses[from].label, buses[to].label
                ),
            ));
        }
        if from == to {
            return Err(Error::parse(
                "mpc.branch",
                format!("branch at bus {} is a self loop", buses[from].label),
            ));
        }
        let rate = row.get(5).copied().unwrap_or(0.0);
        lines.push(Line {
            from,
            to,
            susceptance: 1.0 / x,
            limit: if rate > 0.0 { rate } else { big_limit },
            nu: opts.line_nu,
        });
    }

    let mut generators: Vec<Generator> = Vec::new();
    if let Some(gen_block) = gen_block {
        require_columns(gen_block, 10)?;
        let costs = match cost_block {
            Some(cb) => {
                require_columns(cb, 4)?;
                if cb.rows.len() < gen_block.rows.len() {
                    return Err(Error::parse(
                        "mpc.gencost",
                        format!(
                            "{} rows for {} generators",
                            cb.rows.len(),
                            gen_block.rows.len()
                        ),
                    ));
                }
                cb.rows[..gen_block.rows.len()]
                    .iter()
                    .enumerate()
                    .map(|(g, row)| parse_cost(row, g))
                    .collect::<Result<Vec<_>>>()?
            }
            None => vec![QuadCost::default(); gen_block.rows.len()],
        };
        for (row, cost) in gen_block.rows.iter().zip(costs) {
            let bus = lookup(row[0], "mpc.gen")?;
            if generators.iter().any(|g| g.bus == bus) {
                return Err(Error::DuplicateGenerator(buses[bus].label));
            }
            generators.push(Generator {
                bus,
                p_min: row[9],
                p_max: row[8],
                cost,
                nu: opts.gen_nu,
            });
        }
    }

    let slack = match opts.slack_label {
        Some(label) => *by_label.get(&label).ok_or(Error::UnknownBus(label))?,
        None => buses
            .len()
            .checked_sub(1)
            .ok_or_else(|| Error::parse("mpc.bus", "no buses"))?,
    };

    let grid = Grid {
        base_mva: base_mva.unwrap_or(100.0),
        buses,
        lines,
        generators,
        slack,
    };
    if !grid.is_connected() {
        let unreached = grid.reachable_from(0).iter().filter(|s| !**s).count();
        return Err(Error::Disconnected {
            root: grid.buses[0].label,
            unreached,
        });
    }
    Ok(grid)
}

fn parse_cost(row: &[f64], g: usize) -> Result<QuadCost> {
    let ctx = format!("mpc.gencost row {}", g + 1);
    if row[0] != 2.0 {
        return Err(Error::parse(
            ctx,
            format!(
                "cost model {} unsupported (only polynomial model 2)",
                row[0]
            ),
        ));
    }
    let ncost = row[3];
    let coeffs = |k: usize| -> Result<&[f64]> {
        row.get(4..4 + k).ok_or_else(|| {
            Error::parse(
                ctx.clone(),
                format!("NCOST = {k} but only {} coefficients", row.len() - 4),
            )
        })
    };
    if ncost == 3.0 {
        let c = coeffs(3)?;
        Ok(QuadCost {
            quadratic: c[0],
            linear: c[1],
            constant: c[2],
        })
    } else if ncost == 2.0 {
        let c = coeffs(2)?;
        Ok(QuadCost {
            quadratic: 0.0,
            linear: c[0],
            constant: c[1],
        })
    } else {
        Err(Error::parse(
            ctx,
            format!("NCOST = {ncost} unsupported (2 or 3)"),
        ))
    }
}

/// Writes a grid in the same case subset. Susceptances are written back as
/// reactances `1/b`; safety parameters are not part of the format.
pub fn serialize_matpower(grid: &Grid, name: &str) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "function mpc = {name}");
    let _ = writeln!(out, "mpc.version = '2';");
    let _ = writeln!(out, "mpc.baseMVA = {};", grid.base_mva);
    let _ = writeln!(
        out,
        "\n%% bus data\n%\tbus_i\ttype\tPd\tQd\tGs\tBs\tarea\tVm\tVa\tbaseKV\tzone\tVmax\tVmin"
    );
    let _ = writeln!(out, "mpc.bus = [");
    let gen_index = grid.generator_index();
    for (i, b) in grid.buses.iter().enumerate() {
        let kind = if i == grid.slack {
            3
        } else if gen_index[i].is_some() {
            2
        } else {
            1
        };
        let _ = writeln!(
            out,
            "\t{}\t{kind}\t{}\t0\t0\t0\t1\t1\t0\t0\t1\t1.1\t0.9;",
            b.label, b.load
        );
    }
    let _ = writeln!(out, "];");
    let _ = writeln!(
        out,
        "\n%% generator data\n%\tbus\tPg\tQg\tQmax\tQmin\tVg\tmBase\tstatus\tPmax\tPmin"
    );
    let _ = writeln!(out, "mpc.gen = [");
    for g in &grid.generators {
        let _ = writeln!(
            out,
            "\t{}\t0\t0\t0\t0\t1\t{}\t1\t{}\t{};",
            grid.buses[g.bus].label, grid.base_mva, g.p_max, g.p_min
        );
    }
    let _ = writeln!(out, "];");
    let _ = writeln!(
        out,
        "\n%% branch data\n%\tfbus\ttbus\tr\tx\tb\trateA\trateB\trateC\tratio\tangle\tstatus"
    );
    let _ = writeln!(out, "mpc.branch = [");
    for l in &grid.lines {
        let _ = writeln!(
            out,
            "\t{}\t{}\t0\t{}\t0\t{}\t{}\t{}\t0\t0\t1;",
            grid.buses[l.from].label,
            grid.buses[l.to].label,
            1.0 / l.susceptance,
            l.limit,
            l.limit,
            l.limit
        );
    }
    let _ = writeln!(out, "];");
    let _ = writeln!(
        out,
        "\n%% generator cost data\n%\t2\tstartup\tshutdown\tn\tc2\tc1\tc0"
    );
    let _ = writeln!(out, "mpc.gencost = [");
    for g in &grid.generators {
        let _ = writeln!(
            out,
            "\t2\t0\t0\t3\t{}\t{}\t{};",
            g.cost.quadratic, g.cost.linear, g.cost.constant
        );
    }
    let _ = writeln!(out, "];");
    out
}
