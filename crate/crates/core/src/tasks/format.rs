//! Line-oriented suite files.
//!
//! ```text
//! suite     = header NL { line NL } ;
//! header    = "diffuse-suite v1" ;
//! line      = blank | comment | section | directive ;
//! comment   = "#" { any } ;
//! section   = "[" ( "task" | "record" ) " " name "]" ;
//! directive = key ":" " " value ;
//!
//! (before any section)
//! held-out: name
//!
//! (in [task …] and [record …])
//! prompt:  text with ${slot} references        repeatable
//! samples: integer                               evaluation sample count N
//! bias:    count " " completion                  repeatable
//! echo:    integer                               copy pairs per target value
//! aside:   count " " text with ${slot} references   repeatable
//!
//! (in [task …])
//! slot:    name " " int ".." int                 repeatable
//! bind:    name "=" int { " " name "=" int }     repeatable
//! parser:  "single" | "multi " k
//! target:  "range " operand " " operand | "uniform" | "weighted"
//!        | "samples " relative-path | "open"
//! value:   text                                  with target uniform
//! value:   weight " " text                       with target weighted
//! operand = int | "${" name "}" ;
//!
//! (in [record …])
//! field:   name " " ("categorical" | "open") " " v { " | " v }
//! budget:  integer
//! ```
//!
//! Sample files hold `value<TAB>count` rows; `#` starts a comment line.

use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::ParserMode;

use super::{
    FieldKind, FieldSpec, Operand, RecordSchema, SlotDomain, SlotValues, SuiteConfig, TargetSpec, TaskSpec,
    DEFAULT_EVAL_SAMPLES,
};

pub const FORMAT_HEADER: &str = "diffuse-suite v1";

struct Ctx<'a> {
    file: &'a str,
}

impl Ctx<'_> {
    fn err(&self, line: usize, field: &str, message: impl Into<String>) -> Error {
        Error::Schema {
            file: self.file.to_string(),
            line,
            field: field.to_string(),
            message: message.into(),
        }
    }
}

#[derive(Default)]
struct Draft {
    name: String,
    record: bool,
    line: usize,
    prompts: Vec<String>,
    slots: Vec<SlotDomain>,
    bindings: Vec<SlotValues>,
    parser: Option<ParserMode>,
    samples: Option<usize>,
    target: Option<(usize, String)>,
    values: Vec<(usize, String)>,
    bias: Vec<(u64, String)>,
    echo: u64,
    aside: Vec<(u64, String)>,
    fields: Vec<FieldSpec>,
    budget: Option<usize>,
}

fn parse_int<T: std::str::FromStr>(ctx: &Ctx, line: usize, field: &str, s: &str) -> Result<T> {
    s.trim()
        .parse()
        .map_err(|_| ctx.err(line, field, format!("`{s}` is not a valid integer")))
}

fn parse_operand(ctx: &Ctx, line: usize, s: &str) -> Result<Operand> {
    match s.strip_prefix("${").and_then(|r| r.strip_suffix('}')) {
        Some(name) => Ok(Operand::Slot(name.to_string())),
        None => Ok(Operand::Lit(parse_int(ctx, line, "target", s)?)),
    }
}

/// Parses suite text. `read_samples` maps a sample-file reference to its contents.
pub fn parse_suite(text: &str, file: &str, read_samples: &dyn Fn(&str) -> Result<String>) -> Result<SuiteConfig> {
    let ctx = Ctx { file };
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let significant = |l: &str| !l.trim().is_empty() && !l.trim_start().starts_with('#');
    match lines.by_ref().find(|(_, l)| significant(l)) {
        Some((_, l)) if l.trim() == FORMAT_HEADER => {}
        Some((n, l)) => return Err(ctx.err(n, "header", format!("expected `{FORMAT_HEADER}`, found `{l}`"))),
        None => return Err(ctx.err(1, "header", "file is empty")),
    }

    let mut suite = SuiteConfig {
        tasks: Vec::new(),
        held_out: Vec::new(),
    };
    let mut draft: Option<Draft> = None;
    for (n, raw) in lines {
        if !significant(raw) {
            continue;
        }
        let line = raw.trim_start();
        if let Some(header) = line.strip_prefix('[') {
            let header = header
                .trim_end()
                .strip_suffix(']')
                .ok_or_else(|| ctx.err(n, "section", "missing `]`"))?;
            let (kind, name) = header
                .split_once(' ')
                .ok_or_else(|| ctx.err(n, "section", "expected `[task name]` or `[record name]`"))?;
            let record = match kind {
                "task" => false,
                "record" => true,
                other => return Err(ctx.err(n, "section", format!("unknown section kind `{other}`"))),
            };
            if let Some(d) = draft.take() {
                suite.tasks.push(finish(&ctx, d, read_samples)?);
            }
            draft = Some(Draft {
                name: name.trim().to_string(),
                record,
                line: n,
                ..Draft::default()
            });
            continue;
        }
        let (key, value) = line
            .split_once(':')
            .ok_or_else(|| ctx.err(n, "directive", format!("expected `key: value`, found `{line}`")))?;
        let key = key.trim();
        let value = value.strip_prefix(' ').unwrap_or(value);
        let Some(d) = draft.as_mut() else {
            match key {
                "held-out" => suite.held_out.push(value.trim().to_string()),
                _ => return Err(ctx.err(n, key, "directive outside any section")),
            }
            continue;
        };
        let task_only = |d: &Draft| {
            if d.record {
                Err(ctx.err(n, key, "not allowed in a record section"))
            } else {
                Ok(())
            }
        };
        match key {
            "prompt" => d.prompts.push(value.to_string()),
            "samples" => d.samples = Some(parse_int(&ctx, n, key, value)?),
            "echo" => d.echo = parse_int(&ctx, n, key, value)?,
            "aside" => {
                let (count, text) = value
                    .split_once(' ')
                    .ok_or_else(|| ctx.err(n, key, "expected `count prompt`"))?;
                d.aside.push((parse_int(&ctx, n, key, count)?, text.to_string()));
            }
            "bias" => {
                let (count, completion) = value
                    .split_once(' ')
                    .ok_or_else(|| ctx.err(n, key, "expected `count completion`"))?;
                d.bias.push((parse_int(&ctx, n, key, count)?, completion.to_string()));
            }
            "slot" => {
                task_only(d)?;
                let (name, range) = value
                    .trim()
                    .split_once(' ')
                    .ok_or_else(|| ctx.err(n, key, "expected `name lo..hi`"))?;
                let (lo, hi) = range
                    .split_once("..")
                    .ok_or_else(|| ctx.err(n, key, "expected `lo..hi`"))?;
                d.slots.push(SlotDomain {
                    name: name.to_string(),
                    lo: parse_int(&ctx, n, key, lo)?,
                    hi: parse_int(&ctx, n, key, hi)?,
                });
            }
            "bind" => {
                task_only(d)?;
                let mut b = SlotValues::new();
                for pair in value.split_whitespace() {
                    let (k, v) = pair
                        .split_once('=')
                        .ok_or_else(|| ctx.err(n, key, format!("expected `name=value`, found `{pair}`")))?;
                    b.insert(k.to_string(), parse_int(&ctx, n, key, v)?);
                }
                d.bindings.push(b);
            }
            "parser" => {
                task_only(d)?;
                let v = value.trim();
                d.parser = Some(match v.split_once(' ') {
                    None if v == "single" => ParserMode::Single,
                    Some(("multi", k)) => ParserMode::Multi(parse_int(&ctx, n, key, k)?),
                    _ => return Err(ctx.err(n, key, format!("unknown parser `{v}`"))),
                });
            }
            "target" => {
                task_only(d)?;
                if d.target.is_some() {
                    return Err(ctx.err(n, key, "target declared twice"));
                }
                d.target = Some((n, value.trim().to_string()));
            }
            "value" => {
                task_only(d)?;
                d.values.push((n, value.to_string()));
            }
            "field" => {
                if !d.record {
                    return Err(ctx.err(n, key, "only allowed in a record section"));
                }
                let mut parts = value.splitn(3, ' ');
                let (name, kind, vals) = (parts.next(), parts.next(), parts.next());
                let (Some(name), Some(kind), Some(vals)) = (name, kind, vals) else {
                    return Err(ctx.err(n, key, "expected `name kind v1 | v2 ...`"));
                };
                let kind = match kind {
                    "categorical" => FieldKind::Categorical,
                    "open" => FieldKind::Open,
                    other => return Err(ctx.err(n, key, format!("unknown field kind `{other}`"))),
                };
                d.fields.push(FieldSpec {
                    name: name.to_string(),
                    kind,
                    values: vals.split(" | ").map(|s| s.trim().to_string()).collect(),
                });
            }
            "budget" => {
                if !d.record {
                    return Err(ctx.err(n, key, "only allowed in a record section"));
                }
                d.budget = Some(parse_int(&ctx, n, key, value)?);
            }
            other => return Err(ctx.err(n, other, "unknown directive")),
        }
    }
    if let Some(d) = draft.take() {
        suite.tasks.push(finish(&ctx, d, read_samples)?);
    }
    suite.validate()?;
    Ok(suite)
}

fn finish(ctx: &Ctx, d: Draft, read_samples: &dyn Fn(&str) -> Result<String>) -> Result<TaskSpec> {
    let samples = d.samples.unwrap_or(DEFAULT_EVAL_SAMPLES);
    if d.record {
        let schema = RecordSchema {
            fields: d.fields,
            budget: d.budget.ok_or_else(|| ctx.err(d.line, "budget", "record section needs `budget:`"))?,
        };
        return Ok(TaskSpec {
            name: d.name,
            prompts: d.prompts,
            slots: Vec::new(),
            bindings: Vec::new(),
            parser: ParserMode::Multi(schema.fields.len()),
            target: TargetSpec::Records(schema),
            samples,
            bias: d.bias,
            echo: d.echo,
            aside: d.aside,
        });
    }
    let (tline, target) = d
        .target
        .ok_or_else(|| ctx.err(d.line, "target", format!("task `{}` declares no target", d.name)))?;
    let (kind, arg) = target.split_once(' ').unwrap_or((target.as_str(), ""));
    let no_values = |kind: &str| match d.values.first() {
        Some((n, _)) => Err(ctx.err(*n, "value", format!("`value:` lines are not used by target `{kind}`"))),
        None => Ok(()),
    };
    let target = match kind {
        "range" => {
            no_values(kind)?;
            let (lo, hi) = arg
                .split_once(' ')
                .ok_or_else(|| ctx.err(tline, "target", "expected `range low high`"))?;
            TargetSpec::Range {
                low: parse_operand(ctx, tline, lo.trim())?,
                high: parse_operand(ctx, tline, hi.trim())?,
            }
        }
        "uniform" => TargetSpec::Uniform(d.values.into_iter().map(|(_, v)| v).collect()),
        "weighted" => TargetSpec::Weighted(
            d.values
                .into_iter()
                .map(|(n, v)| {
                    let (w, text) = v
                        .split_once(' ')
                        .ok_or_else(|| ctx.err(n, "value", "expected `weight text`"))?;
                    let w: f64 = w
                        .parse()
                        .map_err(|_| ctx.err(n, "value", format!("`{w}` is not a weight")))?;
                    Ok((text.to_string(), w))
                })
                .collect::<Result<_>>()?,
        ),
        "samples" => {
            no_values(kind)?;
            let file = arg.trim();
            if file.is_empty() {
                return Err(ctx.err(tline, "target", "samples target needs a file"));
            }
            let counts = parse_sample_file(&read_samples(file)?, file)?;
            TargetSpec::Samples {
                file: file.to_string(),
                counts,
            }
        }
        "open" => {
            no_values(kind)?;
            TargetSpec::Open
        }
        other => return Err(ctx.err(tline, "target", format!("unknown target kind `{other}`"))),
    };
    Ok(TaskSpec {
        name: d.name,
        prompts: d.prompts,
        slots: d.slots,
        bindings: d.bindings,
        target,
        parser: d.parser.unwrap_or(ParserMode::Single),
        samples,
        bias: d.bias,
        echo: d.echo,
        aside: d.aside,
    })
}

/// `value<TAB>count` rows.
pub fn parse_sample_file(text: &str, file: &str) -> Result<Vec<(String, u64)>> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .has_headers(false)
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let mut out = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row = row.map_err(|e| Error::Schema {
            file: file.to_string(),
            line: e.position().map_or(i + 1, |p| p.line() as usize),
            field: "row".into(),
            message: e.to_string(),
        })?;
        let line = row.position().map_or(i + 1, |p| p.line() as usize);
        let bad = |message: String| Error::Schema {
            file: file.to_string(),
            line,
            field: "row".into(),
            message,
        };
        if row.len() != 2 {
            return Err(bad(format!("expected 2 tab-separated columns, found {}", row.len())));
        }
        let count = row[1]
            .trim()
            .parse()
            .map_err(|_| bad(format!("`{}` is not a count", &row[1])))?;
        out.push((row[0].to_string(), count));
    }
    if out.is_empty() {
        return Err(Error::Schema {
            file: file.to_string(),
            line: 1,
            field: "row".into(),
            message: "sample file has no rows".into(),
        });
    }
    Ok(out)
}

/// Reads a suite file; sample files resolve relative to its directory.
pub fn load_suite(path: impl AsRef<Path>) -> Result<SuiteConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let read = move |rel: &str| {
        let p = dir.join(rel);
        std::fs::read_to_string(&p).map_err(|e| Error::io(p, e))
    };
    parse_suite(&text, &path.display().to_string(), &read)
}

fn operand_text(op: &Operand) -> String {
    match op {
        Operand::Lit(v) => v.to_string(),
        Operand::Slot(s) => format!("${{{s}}}"),
    }
}

/// Canonical text for `suite`; sample files are referenced, not rewritten.
pub fn serialize_suite(suite: &SuiteConfig) -> String {
    let mut out = format!("{FORMAT_HEADER}\n");
    for h in &suite.held_out {
        out += &format!("held-out: {h}\n");
    }
    for t in &suite.tasks {
        let kind = if t.is_record() { "record" } else { "task" };
        out += &format!("\n[{kind} {}]\n", t.name);
        if !t.is_record() {
            match t.parser {
                ParserMode::Single => out += "parser: single\n",
                ParserMode::Multi(k) => out += &format!("parser: multi {k}\n"),
            }
        }
        out += &format!("samples: {}\n", t.samples);
        for s in &t.slots {
            out += &format!("slot: {} {}..{}\n", s.name, s.lo, s.hi);
        }
        for b in &t.bindings {
            let pairs: Vec<String> = b.iter().map(|(k, v)| format!("{k}={v}")).collect();
            out += &format!("bind: {}\n", pairs.join(" "));
        }
        for p in &t.prompts {
            out += &format!("prompt: {p}\n");
        }
        match &t.target {
            TargetSpec::Range { low, high } => {
                out += &format!("target: range {} {}\n", operand_text(low), operand_text(high))
            }
            TargetSpec::Uniform(values) => {
                out += "target: uniform\n";
                values.iter().for_each(|v| out += &format!("value: {v}\n"));
            }
            TargetSpec::Weighted(entries) => {
                out += "target: weighted\n";
                entries.iter().for_each(|(v, w)| out += &format!("value: {w} {v}\n"));
            }
            TargetSpec::Samples { file, .. } => out += &format!("target: samples {file}\n"),
            TargetSpec::Open => out += "target: open\n",
            TargetSpec::Records(schema) => {
                for f in &schema.fields {
                    let kind = match f.kind {
                        FieldKind::Categorical => "categorical",
                        FieldKind::Open => "open",
                    };
                    out += &format!("field: {} {kind} {}\n", f.name, f.values.join(" | "));
                }
                out += &format!("budget: {}\n", schema.budget);
            }
        }
        for (count, completion) in &t.bias {
            out += &format!("bias: {count} {completion}\n");
        }
        if t.echo > 0 {
            out += &format!("echo: {}\n", t.echo);
        }
        for (count, text) in &t.aside {
            out += &format!("aside: {count} {text}\n");
        }
    }
    out
}
