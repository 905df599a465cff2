//! Acceptance criteria. Each prints one PASS/FAIL line with its runtime
//! budget; any failure exits non-zero. No network access is needed.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::io::{BufRead, BufReader};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::{Child, Command, Stdio};
use std::sync::Arc;
use std::time::{Duration, Instant};

use hybrag_core::agent::{AgentConfig, MultiHopAgent, Termination};
use hybrag_core::corpus::{chunk_corpus, Block, ChunkPolicy, Corpus, Modality, ParsedDocument};
use hybrag_core::embedding::{Embedder, EmbeddingVector, HashEmbedder};
use hybrag_core::evaluation::score_challenge;
use hybrag_core::fulltext::{index_chunks, Bm25Params};
use hybrag_core::gateway::{
    ChatMessage, ChatProvider, Completion, CompletionParams, RecordingProvider, ScriptedProvider,
    TemplateCatalog, Usage,
};
use hybrag_core::graph_store::{GraphStore, Triple};
use hybrag_core::kg::{aggregate_hierarchy, graph_retrieve, HierarchyConfig};
use hybrag_core::retrieval::{
    fuse_hybrid, hit_list, Fusion, GraphSource, HitSource, KeywordSource, Reranker, RerankKind,
    SearchEngine, Source, TableSource, VectorSource,
};
use hybrag_core::table_store::{
    AggFn, CmpOp, ColumnType, Predicate, Query, QueryResult, Row, TableSchema, TableStore, Value,
};
use hybrag_core::vector_index::{Collection, ScoredChunk, VectorRecord};
use hybrag_core::workspace::{index_all, IndexReport, Models, Stores};
use hybrag_core::writer::{cited_markers, ClaimVerdict, DeepWriter, WriterConfig};
use hybrag_core::{Chunk, Workspace, WorkspaceConfig};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde_json::{json, Value as Json};

type Outcome = Result<(), String>;
/// (name, runtime budget in seconds, check)
type Criterion = (&'static str, u64, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($msg)+));
        }
    };
}

fn fail<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// ---------------------------------------------------------------------------
// 1. scoring formula

fn c1_scoring() -> Outcome {
    let max = score_challenge(100.0, 100.0).map_err(fail)?.total;
    ensure!((max - 133.33).abs() <= 0.01, "max score {max}");
    let mut rng = StdRng::seed_from_u64(1);
    for _ in 0..1000 {
        let (r, g) = (rng.gen_range(0.0..=100.0), rng.gen_range(0.0..=100.0));
        let base = score_challenge(r, g).map_err(fail)?.total;
        let r2 = r + rng.gen::<f64>() * (100.0 - r);
        let g2 = g + rng.gen::<f64>() * (100.0 - g);
        let up_r = score_challenge(r2, g).map_err(fail)?.total;
        let up_g = score_challenge(r, g2).map_err(fail)?.total;
        ensure!(up_r >= base && (r2 == r || up_r > base), "not monotone in R at ({r}, {g})");
        ensure!(up_g >= base && (g2 == g || up_g > base), "not monotone in G at ({r}, {g})");
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// 2. vector exactness

fn unit_vector(rng: &mut StdRng, dim: usize) -> Vec<f32> {
    let raw: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
    raw.iter().map(|x| (x / norm) as f32).collect()
}

fn brute_force_topk(data: &[(String, Vec<f32>)], q: &[f32], k: usize) -> Vec<String> {
    let norm = |v: &[f32]| v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt();
    let qn = norm(q);
    let mut scored: Vec<(f64, &str)> = data
        .iter()
        .map(|(id, v)| {
            let dot: f64 = v.iter().zip(q).map(|(&a, &b)| f64::from(a) * f64::from(b)).sum();
            (dot / (norm(v) * qn), id.as_str())
        })
        .collect();
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(b.1)));
    scored.into_iter().take(k).map(|(_, id)| id.to_string()).collect()
}

fn c2_vector() -> Outcome {
    let mut rng = StdRng::seed_from_u64(2);
    let dim = 256;
    let mut data: Vec<(String, Vec<f32>)> = (0..980).map(|i| (format!("v{i:04}"), unit_vector(&mut rng, dim))).collect();
    // Exact duplicates under other ids exercise the tie rule.
    for i in 0..20 {
        let src = data[i * 7].1.clone();
        data.push((format!("u{i:04}"), src));
    }
    let mut coll = Collection::new("bench", dim);
    coll.insert(
        data.iter()
            .map(|(id, v)| VectorRecord {
                chunk_id: id.clone(),
                vector: EmbeddingVector(v.clone()),
                payload: Default::default(),
            })
            .collect(),
    )
    .map_err(fail)?;
    let mut queries: Vec<Vec<f32>> = (0..45).map(|_| unit_vector(&mut rng, dim)).collect();
    queries.extend((0..5).map(|i| data[i * 7].1.clone()));
    for (qi, q) in queries.iter().enumerate() {
        let got: Vec<String> = coll
            .search_topk(&EmbeddingVector(q.clone()), 10, None)
            .map_err(fail)?
            .into_iter()
            .map(|h| h.chunk_id)
            .collect();
        let want = brute_force_topk(&data, q, 10);
        ensure!(got == want, "query {qi}: {got:?} != {want:?}");
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// 3. BM25 oracle

fn text_chunk(id: &str, doc: &str, text: &str) -> Chunk {
    Chunk {
        chunk_id: id.into(),
        doc_id: doc.into(),
        page_span: (1, 1),
        modality: Modality::Text,
        text: text.into(),
        media_path: None,
        token_count: 0,
        parent_span: (0, 0),
        metadata: BTreeMap::new(),
    }
}

fn naive_tokens(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn naive_bm25(docs: &[(String, String)], query: &str, k: usize) -> Vec<(String, f64)> {
    let (k1, b) = (1.2, 0.75);
    let toks: Vec<(String, Vec<String>)> = docs.iter().map(|(id, t)| (id.clone(), naive_tokens(t))).collect();
    let n = toks.len() as f64;
    let avgdl = toks.iter().map(|(_, t)| t.len() as f64).sum::<f64>() / n;
    let terms: BTreeSet<String> = naive_tokens(query).into_iter().collect();
    let mut out = Vec::new();
    for (id, t) in &toks {
        if !terms.iter().any(|q| t.contains(q)) {
            continue;
        }
        let dl = t.len() as f64;
        let mut score = 0.0;
        for q in &terms {
            let tf = t.iter().filter(|w| *w == q).count() as f64;
            if tf == 0.0 {
                continue;
            }
            let df = toks.iter().filter(|(_, d)| d.contains(q)).count() as f64;
            let idf = ((n - df + 0.5) / (df + 0.5) + 1.0).ln();
            score += idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * dl / avgdl));
        }
        out.push((id.clone(), score));
    }
    out.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    out.truncate(k);
    out
}

#[allow(clippy::approx_constant)]
fn c3_bm25() -> Outcome {
    let index = index_chunks(&[text_chunk("d1", "d1", "apple banana"), text_chunk("d2", "d2", "banana cherry")]).map_err(fail)?;
    let params = Bm25Params::default();
    let s1 = index.bm25_score(&params, &["apple"], "d1").map_err(fail)?;
    let s2 = index.bm25_score(&params, &["apple"], "d2").map_err(fail)?;
    ensure!((s1 - 0.6931).abs() < 1e-4 && (s1 - 2f64.ln()).abs() < 1e-6, "hand fixture score {s1}");
    ensure!(s2 == 0.0, "non-matching doc scored {s2}");

    let vocab = [
        "apple", "Banana", "cherry", "delta", "echo", "fox", "golf", "hotel", "india", "juliet", "kilo", "lima",
        "mike", "nov", "oscar", "papa", "quartz", "romeo", "sierra", "tango", "x1", "y22",
    ];
    let mut rng = StdRng::seed_from_u64(3);
    for corpus_no in 0..20 {
        let n = rng.gen_range(1..=50);
        let docs: Vec<(String, String)> = (0..n)
            .map(|i| {
                let len = rng.gen_range(1..=40);
                let words: Vec<&str> = (0..len).map(|_| vocab[rng.gen_range(0..vocab.len())]).collect();
                (format!("c{i:03}"), words.join(if rng.gen_bool(0.5) { " " } else { ", " }))
            })
            .collect();
        let chunks: Vec<Chunk> = docs.iter().map(|(id, t)| text_chunk(id, id, t)).collect();
        let index = index_chunks(&chunks).map_err(fail)?;
        for _ in 0..10 {
            let qlen = rng.gen_range(1..=4);
            let query: Vec<&str> = (0..qlen).map(|_| vocab[rng.gen_range(0..vocab.len())]).collect();
            let query = query.join(" ");
            let got = index.search_keyword(&params, &query, 10);
            let want = naive_bm25(&docs, &query, 10);
            let got_ids: Vec<&str> = got.iter().map(|h| h.chunk_id.as_str()).collect();
            let want_ids: Vec<&str> = want.iter().map(|h| h.0.as_str()).collect();
            ensure!(got_ids == want_ids, "corpus {corpus_no} query {query:?}: {got_ids:?} != {want_ids:?}");
            for (g, w) in got.iter().zip(&want) {
                ensure!((g.score - w.1).abs() < 1e-9, "score mismatch on {}", g.chunk_id);
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// 4. fusion boundaries

fn random_list(rng: &mut StdRng) -> Vec<ScoredChunk> {
    let n = rng.gen_range(1..=12);
    let mut ids: Vec<usize> = (0..30).collect();
    let mut out = Vec::new();
    for _ in 0..n {
        let id = ids.swap_remove(rng.gen_range(0..ids.len()));
        // Coarse scores so ties happen.
        let score = rng.gen_range(0..20) as f64 / 4.0;
        out.push(ScoredChunk {
            chunk_id: format!("c{id:02}"),
            score,
        });
    }
    out
}

fn ranked_ids(list: &[ScoredChunk]) -> Vec<String> {
    let mut sorted = list.to_vec();
    sorted.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap().then(a.chunk_id.cmp(&b.chunk_id)));
    sorted.into_iter().map(|s| s.chunk_id).collect()
}

fn c4_fusion() -> Outcome {
    let mut rng = StdRng::seed_from_u64(4);
    for case in 0..100 {
        let vec = random_list(&mut rng);
        let kw = random_list(&mut rng);
        let vh = hit_list(Source::Vector, vec.clone());
        let kh = hit_list(Source::Fulltext, kw.clone());
        let restricted = |ranking: Vec<String>, keep: &[String]| -> Vec<String> {
            ranking.into_iter().filter(|id| keep.contains(id)).collect()
        };
        let v_order = ranked_ids(&vec);
        let k_order = ranked_ids(&kw);
        let at_one: Vec<String> = fuse_hybrid(&vh, &kh, 1.0, Fusion::AlphaBlend).chunk_ids().into_iter().map(String::from).collect();
        ensure!(restricted(at_one, &v_order) == v_order, "case {case}: alpha=1 permutation differs");
        let at_zero: Vec<String> = fuse_hybrid(&vh, &kh, 0.0, Fusion::AlphaBlend).chunk_ids().into_iter().map(String::from).collect();
        ensure!(restricted(at_zero, &k_order) == k_order, "case {case}: alpha=0 permutation differs");

        let rrf = fuse_hybrid(&vh, &kh, 0.5, Fusion::Rrf).chunk_ids().into_iter().map(String::from).collect::<Vec<_>>();
        let c = rng.gen_range(0.01..100.0);
        let scaled: Vec<ScoredChunk> = kw
            .iter()
            .map(|s| ScoredChunk {
                chunk_id: s.chunk_id.clone(),
                score: s.score * c,
            })
            .collect();
        let rrf_scaled = fuse_hybrid(&vh, &hit_list(Source::Fulltext, scaled), 0.5, Fusion::Rrf)
            .chunk_ids()
            .into_iter()
            .map(String::from)
            .collect::<Vec<_>>();
        ensure!(rrf == rrf_scaled, "case {case}: RRF changed under scaling by {c}");
    }
    let sc = |id: &str, s: f64| ScoredChunk {
        chunk_id: id.into(),
        score: s,
    };
    let worked = fuse_hybrid(
        &hit_list(Source::Vector, vec![sc("c1", 0.9), sc("c2", 0.5)]),
        &hit_list(Source::Fulltext, vec![sc("c2", 3.0), sc("c3", 1.0)]),
        0.5,
        Fusion::AlphaBlend,
    );
    ensure!(worked.chunk_ids() == ["c1", "c2", "c3"], "worked example gave {:?}", worked.chunk_ids());
    Ok(())
}

// ---------------------------------------------------------------------------
// 5. table store vs a nested-loop evaluator

struct NaiveTable {
    schema: TableSchema,
    rows: Vec<Vec<Value>>,
}

fn naive_cmp(a: &Value, b: &Value) -> std::cmp::Ordering {
    match (a, b) {
        (Value::Integer(x), Value::Integer(y)) => x.cmp(y),
        (Value::Real(x), Value::Real(y)) => x.partial_cmp(y).unwrap(),
        (Value::Text(x), Value::Text(y)) => x.cmp(y),
        (Value::Boolean(x), Value::Boolean(y)) => x.cmp(y),
        _ => panic!("oracle only compares like types"),
    }
}

fn holds(op: CmpOp, o: std::cmp::Ordering) -> bool {
    use std::cmp::Ordering::*;
    match op {
        CmpOp::Eq => o == Equal,
        CmpOp::Ne => o != Equal,
        CmpOp::Lt => o == Less,
        CmpOp::Le => o != Greater,
        CmpOp::Gt => o == Greater,
        CmpOp::Ge => o != Less,
    }
}

fn random_value(rng: &mut StdRng, ty: ColumnType) -> Value {
    match ty {
        ColumnType::Integer => Value::Integer(rng.gen_range(-20..20)),
        ColumnType::Real => Value::Real(rng.gen_range(-500..500) as f64 / 10.0),
        ColumnType::Text => Value::Text(["ant", "bee", "cat", "dog", "eel"][rng.gen_range(0..5)].into()),
        ColumnType::Boolean => Value::Boolean(rng.gen()),
    }
}

enum NaiveOut {
    Rows(Vec<String>, Vec<Vec<Value>>),
    Scalar(Value),
    Empty,
}

struct Spec {
    left: usize,
    join: Option<(usize, usize, usize)>,
    left_preds: Vec<(usize, CmpOp, Value)>,
    right_preds: Vec<(usize, CmpOp, Value)>,
    projection: Vec<usize>,
    aggregate: Option<(AggFn, Option<usize>)>,
}

fn naive_eval(tables: &[NaiveTable], s: &Spec) -> NaiveOut {
    let l = &tables[s.left];
    let pass = |row: &[Value], preds: &[(usize, CmpOp, Value)]| {
        preds.iter().all(|(i, op, v)| holds(*op, naive_cmp(&row[*i], v)))
    };
    let mut names: Vec<String> = l.schema.columns.iter().map(|c| c.name.clone()).collect();
    let mut types: Vec<ColumnType> = l.schema.columns.iter().map(|c| c.ty).collect();
    let mut out_rows: Vec<Vec<Value>> = Vec::new();
    match s.join {
        None => {
            for row in l.rows.iter().filter(|r| pass(r, &s.left_preds)) {
                out_rows.push(row.clone());
            }
        }
        Some((ri, lc, rc)) => {
            let r = &tables[ri];
            for (i, c) in r.schema.columns.iter().enumerate() {
                if i == rc {
                    continue;
                }
                names.push(if l.schema.columns.iter().any(|x| x.name == c.name) {
                    format!("{}.{}", r.schema.name, c.name)
                } else {
                    c.name.clone()
                });
                types.push(c.ty);
            }
            for lrow in l.rows.iter().filter(|row| pass(row, &s.left_preds)) {
                for rrow in r.rows.iter().filter(|row| pass(row, &s.right_preds)) {
                    if naive_cmp(&lrow[lc], &rrow[rc]).is_eq() {
                        let mut joined = lrow.clone();
                        joined.extend(rrow.iter().enumerate().filter(|(i, _)| *i != rc).map(|(_, v)| v.clone()));
                        out_rows.push(joined);
                    }
                }
            }
        }
    }
    if let Some((func, col)) = s.aggregate {
        if func == AggFn::Count {
            return NaiveOut::Scalar(Value::Integer(out_rows.len() as i64));
        }
        let c = col.unwrap();
        let cells: Vec<&Value> = out_rows.iter().map(|r| &r[c]).collect();
        let as_f = |v: &Value| match v {
            Value::Integer(i) => *i as f64,
            Value::Real(x) => *x,
            _ => unreachable!(),
        };
        return match func {
            AggFn::Sum if types[c] == ColumnType::Integer => NaiveOut::Scalar(Value::Integer(
                cells.iter().map(|v| if let Value::Integer(i) = v { *i } else { 0 }).sum(),
            )),
            AggFn::Sum => {
                let mut total = 0.0;
                for v in &cells {
                    total += as_f(v);
                }
                NaiveOut::Scalar(Value::Real(total))
            }
            _ if cells.is_empty() => NaiveOut::Empty,
            AggFn::Avg => {
                let mut total = 0.0;
                for v in &cells {
                    total += as_f(v);
                }
                NaiveOut::Scalar(Value::Real(total / cells.len() as f64))
            }
            AggFn::Min => NaiveOut::Scalar((*cells.iter().min_by(|a, b| naive_cmp(a, b)).unwrap()).clone()),
            AggFn::Max => NaiveOut::Scalar((*cells.iter().max_by(|a, b| naive_cmp(a, b)).unwrap()).clone()),
            AggFn::Count => unreachable!(),
        };
    }
    let cols: Vec<usize> = if s.projection.is_empty() { (0..names.len()).collect() } else { s.projection.clone() };
    NaiveOut::Rows(
        cols.iter().map(|&i| names[i].clone()).collect(),
        out_rows.iter().map(|r| cols.iter().map(|&i| r[i].clone()).collect()).collect(),
    )
}

fn c5_tables() -> Outcome {
    let mut rng = StdRng::seed_from_u64(5);
    let types = [ColumnType::Integer, ColumnType::Real, ColumnType::Text, ColumnType::Boolean];
    let mut store = TableStore::new();
    let mut naive = Vec::new();
    for t in 0..50 {
        let ncols = rng.gen_range(2..=5);
        // Column 0 is always an integer key so every pair of tables can join.
        let cols: Vec<(String, ColumnType)> = (0..ncols)
            .map(|c| (format!("c{c}"), if c == 0 { ColumnType::Integer } else { types[rng.gen_range(0..4)] }))
            .collect();
        let col_refs: Vec<(&str, ColumnType)> = cols.iter().map(|(n, t)| (n.as_str(), *t)).collect();
        let schema = TableSchema::new(format!("t{t:02}"), &col_refs);
        let nrows = rng.gen_range(1..=1000);
        let rows: Vec<Vec<Value>> = (0..nrows)
            .map(|_| cols.iter().map(|(_, ty)| random_value(&mut rng, *ty)).collect())
            .collect();
        store.create_table(schema.clone()).map_err(fail)?;
        store
            .insert_rows(&schema.name, rows.iter().map(|r| Row::new(r.clone())).collect())
            .map_err(fail)?;
        naive.push(NaiveTable { schema, rows });
    }
    let ops = [CmpOp::Eq, CmpOp::Ne, CmpOp::Lt, CmpOp::Le, CmpOp::Gt, CmpOp::Ge];
    let mut sum_checks = 0;
    for qn in 0..200 {
        let left = rng.gen_range(0..50);
        let join = if rng.gen_bool(0.3) {
            let r = rng.gen_range(0..50);
            (r != left).then_some((r, 0, 0))
        } else {
            None
        };
        let lt = &naive[left];
        let mut q = Query::table(lt.schema.name.clone());
        let rand_pred = |rng: &mut StdRng, t: &NaiveTable| {
            let c = rng.gen_range(0..t.schema.columns.len());
            (c, ops[rng.gen_range(0..6)], random_value(rng, t.schema.columns[c].ty))
        };
        let left_preds: Vec<_> = (0..rng.gen_range(0..=2)).map(|_| rand_pred(&mut rng, lt)).collect();
        for (c, op, v) in &left_preds {
            q = q.filter(Predicate::new(lt.schema.columns[*c].name.clone(), *op, v.clone()));
        }
        let mut right_preds = Vec::new();
        if let Some((r, lc, rc)) = join {
            let rt = &naive[r];
            q = q.join(&rt.schema.name, &lt.schema.columns[lc].name, &rt.schema.columns[rc].name);
            right_preds = (0..rng.gen_range(0..=1)).map(|_| rand_pred(&mut rng, rt)).collect();
            for (c, op, v) in &right_preds {
                q = q.filter(Predicate::new(format!("{}.{}", rt.schema.name, rt.schema.columns[*c].name), *op, v.clone()));
            }
        }
        let width = lt.schema.columns.len() + join.map_or(0, |(r, _, _)| naive[r].schema.columns.len() - 1);
        let mut spec = Spec {
            left,
            join,
            left_preds,
            right_preds,
            projection: Vec::new(),
            aggregate: None,
        };
        // Resolve output column types for aggregate choice.
        let mut out_types: Vec<ColumnType> = lt.schema.columns.iter().map(|c| c.ty).collect();
        if let Some((r, _, rc)) = join {
            out_types.extend(naive[r].schema.columns.iter().enumerate().filter(|(i, _)| *i != rc).map(|(_, c)| c.ty));
        }
        let numeric: Vec<usize> = (0..width).filter(|&i| matches!(out_types[i], ColumnType::Integer | ColumnType::Real)).collect();
        match rng.gen_range(0..3) {
            0 => {}
            1 => {
                let n = rng.gen_range(1..=width);
                spec.projection = (0..n).map(|_| rng.gen_range(0..width)).collect();
                spec.projection.dedup();
            }
            _ => {
                let func = [AggFn::Count, AggFn::Sum, AggFn::Avg, AggFn::Min, AggFn::Max][rng.gen_range(0..5)];
                let col = (func != AggFn::Count).then(|| numeric[rng.gen_range(0..numeric.len())]);
                spec.aggregate = Some((func, col));
            }
        }
        let want = naive_eval(&naive, &spec);
        // Names for projection/aggregate come from the oracle's view.
        let names = match naive_eval(
            &naive,
            &Spec {
                projection: Vec::new(),
                aggregate: None,
                left_preds: Vec::new(),
                right_preds: Vec::new(),
                ..spec
            },
        ) {
            NaiveOut::Rows(names, _) => names,
            _ => unreachable!(),
        };
        if !spec.projection.is_empty() {
            let cols: Vec<&str> = spec.projection.iter().map(|&i| names[i].as_str()).collect();
            q = q.project(&cols);
        }
        if let Some((func, col)) = spec.aggregate {
            q = q.aggregate(func, col.map(|c| names[c].as_str()));
        }
        let got = store.run_query(&q);
        match (got, want) {
            (Ok(QueryResult::Rows { columns, rows }), NaiveOut::Rows(wc, wr)) => {
                ensure!(columns == wc, "query {qn}: columns {columns:?} != {wc:?}");
                let got_rows: Vec<Vec<Value>> = rows.into_iter().map(|r| r.values).collect();
                ensure!(got_rows == wr, "query {qn}: {} rows vs {} expected", got_rows.len(), wr.len());
            }
            (Ok(QueryResult::Scalar { value, .. }), NaiveOut::Scalar(w)) => {
                let close = match (&value, &w) {
                    (Value::Real(a), Value::Real(b)) => (a - b).abs() <= 1e-9 * b.abs().max(1.0),
                    _ => value == w,
                };
                ensure!(close, "query {qn}: {value:?} != {w:?}");
            }
            (Err(hybrag_core::Error::EmptyAggregate), NaiveOut::Empty) => {}
            (got, _) => return Err(format!("query {qn}: unexpected result {got:?}")),
        }
        // sum = count × avg on the same filtered rows
        if let Some((AggFn::Sum, Some(c))) = spec.aggregate {
            let scalar = |func: AggFn, col: Option<usize>| {
                let mut qq = q.clone();
                qq.aggregate = None;
                store.run_query(&qq.aggregate(func, col.map(|i| names[i].as_str())))
            };
            let sum = scalar(AggFn::Sum, Some(c)).map_err(fail)?.scalar().and_then(Value::as_f64).unwrap();
            let count = scalar(AggFn::Count, None).map_err(fail)?.scalar().and_then(Value::as_f64).unwrap();
            if count > 0.0 {
                let avg = scalar(AggFn::Avg, Some(c)).map_err(fail)?.scalar().and_then(Value::as_f64).unwrap();
                ensure!((sum - count * avg).abs() <= 1e-9 * sum.abs().max(1.0), "query {qn}: sum {sum} vs count*avg {}", count * avg);
                sum_checks += 1;
            }
        }
    }
    ensure!(sum_checks > 0, "no sum/count/avg identity was exercised");
    Ok(())
}

// ---------------------------------------------------------------------------
// 6. graph pipeline

fn bfs(adj: &BTreeMap<usize, BTreeSet<usize>>, seed: usize, k: usize) -> BTreeSet<usize> {
    let mut seen = BTreeSet::from([seed]);
    let mut queue = VecDeque::from([(seed, 0)]);
    while let Some((n, d)) = queue.pop_front() {
        if d == k {
            continue;
        }
        for &m in &adj[&n] {
            if seen.insert(m) {
                queue.push_back((m, d + 1));
            }
        }
    }
    seen
}

fn c6_graph() -> Outcome {
    let catalog = TemplateCatalog::default();
    let mut g = GraphStore::new();
    let mut triples: Vec<Triple> = [("a", "b"), ("a", "c"), ("b", "c"), ("d", "e"), ("d", "f"), ("e", "f"), ("a", "f")]
        .iter()
        .map(|(s, o)| Triple::new(s, "linked", o, "doc:0000"))
        .collect();
    g.import_triples(&triples);
    let cfg = HierarchyConfig {
        levels: 1,
        ..HierarchyConfig::default()
    };
    aggregate_hierarchy(&mut g, &cfg, None, &catalog).map_err(fail)?;
    let level1 = g.nodes().filter(|n| n.layer == 1).count();
    ensure!(level1 == 2, "{level1} level-1 communities");

    let mut rng = StdRng::seed_from_u64(6);
    for graph_no in 0..20 {
        let n = rng.gen_range(2..40);
        let mut adj: BTreeMap<usize, BTreeSet<usize>> = (0..n).map(|i| (i, BTreeSet::new())).collect();
        triples.clear();
        for _ in 0..rng.gen_range(0..2 * n) {
            let (a, b) = (rng.gen_range(0..n), rng.gen_range(0..n));
            triples.push(Triple::new(&format!("n{a}"), "r", &format!("n{b}"), "doc:0000"));
            adj.get_mut(&a).unwrap().insert(b);
            adj.get_mut(&b).unwrap().insert(a);
        }
        let mut rg = GraphStore::new();
        rg.import_triples(&triples);
        for seed in (0..n).filter(|s| rg.node(&format!("n{s}")).is_some()) {
            let mut prev = BTreeSet::new();
            for k in 0..6 {
                let got: BTreeSet<usize> = rg
                    .khop_neighbors(&format!("n{seed}"), k)
                    .map_err(fail)?
                    .iter()
                    .map(|id| id[1..].parse().unwrap())
                    .collect();
                ensure!(prev.is_subset(&got), "graph {graph_no}: khop({seed},{k}) shrank");
                ensure!(got == bfs(&adj, seed, k), "graph {graph_no}: khop({seed},{k}) differs from BFS");
                prev = got;
            }
        }
    }

    let mut toy = GraphStore::new();
    toy.import_triples(&[Triple::new("a", "r", "b", "doc:0000"), Triple::new("b", "r", "c", "doc:0001")]);
    aggregate_hierarchy(&mut toy, &cfg, None, &catalog).map_err(fail)?;
    let summary: Vec<String> = toy.nodes().filter(|n| n.layer == 1).map(|n| n.entity_id.clone()).collect();
    ensure!(summary.len() == 1, "toy graph has {} summaries", summary.len());
    let ev = graph_retrieve(&toy, "a", 1, &HashEmbedder::default()).map_err(fail)?;
    let matched: Vec<&str> = ev.matched_entities.iter().map(|m| m.entity_id.as_str()).collect();
    ensure!(matched == ["a"], "matched {matched:?}");
    ensure!(ev.nodes == ["a", "b"], "subgraph {:?}", ev.nodes);
    ensure!(ev.summary_nodes == summary, "summaries {:?}", ev.summary_nodes);
    Ok(())
}

// ---------------------------------------------------------------------------
// Rule-based responder used to record scripted fixtures. Replies depend only
// on the prompt text, so a recorded run replays exactly.

#[derive(Clone, Copy)]
enum Script {
    TwoHop,
    NeverSufficient,
    Writer,
}

struct Responder(Script);

fn section<'a>(prompt: &'a str, header: &str) -> Vec<&'a str> {
    match prompt.split_once(header) {
        Some((_, rest)) => rest.lines().filter(|l| !l.trim().is_empty()).collect(),
        None => Vec::new(),
    }
}

/// `[i] text` lines.
fn numbered_lines<'a>(lines: &[&'a str]) -> Vec<(usize, &'a str)> {
    lines
        .iter()
        .filter_map(|l| {
            let rest = l.strip_prefix('[')?;
            let (n, text) = rest.split_once("] ")?;
            Some((n.parse().ok()?, text))
        })
        .collect()
}

fn first_sentence(text: &str) -> &str {
    text.split_once(". ").map_or(text.trim_end_matches('.'), |(s, _)| s).trim()
}

impl Responder {
    fn reply(&self, prompt: &str) -> String {
        if prompt.starts_with("Rewrite the question") {
            return "company founded by X".into();
        }
        if prompt.starts_with("Extract the key facts") {
            let passages = numbered_lines(&section(prompt, "Passages:\n"));
            return match passages.first() {
                Some((n, text)) => json!([format!("{} [{n}]", first_sentence(text))]).to_string(),
                None => "[]".into(),
            };
        }
        if prompt.starts_with("Decide whether the notes") {
            let notes = section(prompt, "Notes:\n").join("\n");
            return match self.0 {
                Script::TwoHop if notes.contains("headquartered") => json!({"sufficient": true, "followup_queries": []}),
                _ => json!({"sufficient": false, "followup_queries": ["where is company Y headquartered"]}),
            }
            .to_string();
        }
        if prompt.starts_with("Answer the question using only the numbered notes") {
            let notes = numbered_lines(&section(prompt, "Notes:\n"));
            let cites: Vec<String> = notes
                .iter()
                .filter(|(_, t)| t.contains("headquartered"))
                .map(|(n, _)| n.to_string())
                .collect();
            return format!("Z [{}]", cites.join(", "));
        }
        if prompt.starts_with("Write a one-paragraph summary") {
            let members = section(prompt, "Entities:\n");
            return format!("Community of {}.", members.first().copied().unwrap_or("nothing"));
        }
        if prompt.starts_with("Plan a research report") {
            return json!({
                "title": "Renewable energy overview",
                "sections": [
                    {"heading": "Solar power", "section_query": "solar panels sunlight electricity"},
                    {"heading": "Wind power", "section_query": "wind turbines blades"},
                    {"heading": "Storage", "section_query": "battery storage grid"}
                ]
            })
            .to_string();
        }
        if prompt.starts_with("Write the report section") {
            let ctx = numbered_lines(&section(prompt, "Context:\n"));
            let Some(&(i, text)) = ctx.iter().find(|(_, t)| !t.contains('|')) else {
                return "Nothing to report.".into();
            };
            let j = ctx.iter().map(|(n, _)| *n).find(|&n| n != i).unwrap_or(i);
            return format!("{} [{i}]. Quokkas juggle marmalade happily [{j}].", first_sentence(text));
        }
        panic!("responder has no rule for prompt: {}", prompt.lines().next().unwrap_or(""));
    }
}

impl ChatProvider for Responder {
    fn complete(&self, messages: &[ChatMessage], _: &CompletionParams) -> hybrag_core::Result<Completion> {
        let prompt = &messages.last().expect("one message").content;
        let _ = matches!(self.0, Script::Writer);
        Ok(Completion {
            text: self.reply(prompt),
            usage: Usage::default(),
        })
    }
}

fn record(script: Script) -> Arc<RecordingProvider<Responder>> {
    Arc::new(RecordingProvider::new(Responder(script)))
}

fn replay(rec: &RecordingProvider<Responder>) -> ScriptedProvider {
    ScriptedProvider::new(rec.fixtures().into_iter().collect::<HashMap<_, _>>())
}

fn doc(id: &str, blocks: &[(Modality, &str)]) -> ParsedDocument {
    ParsedDocument {
        doc_id: id.into(),
        title: id.into(),
        blocks: blocks
            .iter()
            .map(|(m, c)| Block {
                block_type: *m,
                page: 1,
                content: c.to_string(),
                media_path: (*m == Modality::Image).then(|| format!("media/{id}.png")),
            })
            .collect(),
    }
}

fn two_hop_docs() -> Vec<ParsedDocument> {
    vec![
        doc("d1", &[(Modality::Text, "X founded company Y.")]),
        doc("d2", &[(Modality::Text, "Company Y is headquartered in Z.")]),
    ]
}

fn with_engine<R>(stores: &Stores, corpus: &Corpus, embedder: &dyn Embedder, f: impl FnOnce(&SearchEngine<'_>) -> R) -> R {
    let vector = VectorSource {
        collection: &stores.vectors,
        embedder,
    };
    let keyword = KeywordSource {
        index: &stores.fulltext,
        params: Bm25Params::default(),
    };
    let graph = GraphSource {
        graph: &stores.graph,
        embedder,
    };
    let table = TableSource { tables: &stores.tables };
    let engine = SearchEngine {
        backends: vec![&vector as &dyn HitSource, &keyword, &graph, &table],
        corpus,
        reranker: Reranker::None,
        default_rerank: RerankKind::None,
    };
    f(&engine)
}

// ---------------------------------------------------------------------------
// 7. multi-hop golden trace

fn c7_agent() -> Outcome {
    let corpus = Corpus::new(chunk_corpus(&two_hop_docs(), ChunkPolicy::default()).map_err(fail)?).map_err(fail)?;
    let cfg = WorkspaceConfig::default();
    let embedder = HashEmbedder::default();
    let catalog = TemplateCatalog::default();
    let stores = Stores::build(&corpus, &cfg, &embedder, None, &catalog).map_err(fail)?;
    let question = "Where is the company founded by X headquartered?";
    let run = |provider: &dyn ChatProvider, config: AgentConfig| {
        with_engine(&stores, &corpus, &embedder, |engine| {
            MultiHopAgent {
                searcher: engine,
                provider,
                catalog: &catalog,
                config,
            }
            .run(question)
        })
    };

    let rec = record(Script::TwoHop);
    let recorded = run(rec.as_ref(), AgentConfig::default()).map_err(fail)?;
    let scripted = replay(&rec);
    let mut traces = Vec::new();
    for _ in 0..3 {
        let a = run(&scripted, AgentConfig::default()).map_err(fail)?;
        ensure!(a.trace.len() == 2, "{} steps", a.trace.len());
        ensure!(a.terminated_by == Termination::Sufficient, "terminated by {:?}", a.terminated_by);
        ensure!(a.answer.contains('Z'), "answer {:?}", a.answer);
        let z_chunk = corpus.document_chunks("d2").next().unwrap().chunk_id.clone();
        ensure!(a.citations.contains(&z_chunk), "citations {:?} lack {z_chunk}", a.citations);
        traces.push(serde_json::to_string(&a).map_err(fail)?);
    }
    ensure!(traces.windows(2).all(|w| w[0] == w[1]), "trace differs across runs");
    ensure!(traces[0] == serde_json::to_string(&recorded).map_err(fail)?, "replay differs from recording");

    let rec = record(Script::NeverSufficient);
    for max_steps in [1, 3, 5] {
        let config = AgentConfig {
            max_steps,
            ..AgentConfig::default()
        };
        let a = run(rec.as_ref(), config.clone()).map_err(fail)?;
        let b = run(&replay(&rec), config).map_err(fail)?;
        ensure!(a.trace.len() == max_steps && b.trace.len() == max_steps, "budget {max_steps}: ran {}", b.trace.len());
        ensure!(b.terminated_by == Termination::Budget, "budget {max_steps}: {:?}", b.terminated_by);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// 8. report writer closure

fn writer_docs() -> Vec<ParsedDocument> {
    let texts = [
        "Solar panels convert sunlight into electricity. Output peaks at midday.",
        "Photovoltaic cells are made from silicon wafers. Efficiency keeps improving.",
        "Wind turbines turn moving air into power. Larger blades capture more energy.",
        "Offshore wind farms face strong steady winds. Maintenance is costly at sea.",
        "Battery storage smooths supply on the grid. Lithium cells dominate today.",
        "Pumped hydro stores energy by lifting water uphill. It is a mature technology.",
        "Grid operators balance demand every second. Forecasts guide dispatch decisions.",
        "Heat pumps move heat instead of burning fuel. They pair well with solar power.",
    ];
    let mut docs: Vec<ParsedDocument> = texts
        .iter()
        .enumerate()
        .map(|(i, t)| doc(&format!("w{i}"), &[(Modality::Text, t)]))
        .collect();
    docs.push(doc("w8", &[(Modality::Table, "| source | share |\n|---|---|\n| solar | 12 |\n| wind | 9 |")]));
    docs.push(doc("w9", &[(Modality::Image, "Wind turbine blades on a hill")]));
    docs
}

fn c8_writer() -> Outcome {
    let chunks = chunk_corpus(&writer_docs(), ChunkPolicy::default()).map_err(fail)?;
    ensure!(chunks.len() == 10, "{} chunks", chunks.len());
    let corpus = Corpus::new(chunks).map_err(fail)?;
    let embedder = HashEmbedder::default();
    let catalog = TemplateCatalog::default();
    let stores = Stores::build(&corpus, &WorkspaceConfig::default(), &embedder, None, &catalog).map_err(fail)?;
    let write = |provider: &dyn ChatProvider| {
        DeepWriter {
            collection: &stores.vectors,
            embedder: &embedder,
            corpus: &corpus,
            provider,
            catalog: &catalog,
            model_fact_check: false,
            config: WriterConfig::default(),
        }
        .write("renewable energy")
    };
    let rec = record(Script::Writer);
    write(rec.as_ref()).map_err(fail)?;
    let scripted = replay(&rec);
    let reports: Vec<_> = (0..3).map(|_| write(&scripted)).collect::<Result<_, _>>().map_err(fail)?;
    let outputs: Vec<String> = reports.iter().map(|r| serde_json::to_string(r).unwrap()).collect();
    ensure!(outputs.windows(2).all(|w| w[0] == w[1]), "report differs across runs");
    let report = &reports[0];

    let body = report.markdown.split("\n## References").next().unwrap();
    let markers = cited_markers(body);
    let keys: BTreeSet<usize> = report.bibliography.keys().copied().collect();
    ensure!(markers == keys, "markers {markers:?} != bibliography {keys:?}");

    for c in corpus.chunks().iter().filter(|c| c.modality != Modality::Text) {
        let caption = c.text.lines().next().unwrap_or("");
        let placements = report
            .markdown
            .lines()
            .filter(|l| (l.starts_with("*Table:") || l.starts_with("*Figure:")) && l.contains(caption.trim_matches('|').trim()))
            .count();
        let listed = report.markdown.lines().filter(|l| l.contains(&format!("`{}`", c.chunk_id))).count();
        ensure!(placements + listed <= 1, "asset {} appears {} times", c.chunk_id, placements + listed);
    }

    let (mut supported, mut unsupported) = (0, 0);
    for check in &report.factcheck {
        let nonsense = check.claim.contains("Quokkas");
        match (nonsense, check.verdict) {
            (true, ClaimVerdict::Unsupported) => unsupported += 1,
            (false, ClaimVerdict::Supported) => supported += 1,
            _ => return Err(format!("claim {:?} judged {:?}", check.claim, check.verdict)),
        }
    }
    ensure!(supported > 0 && unsupported > 0, "supported {supported}, unsupported {unsupported}");
    Ok(())
}

// ---------------------------------------------------------------------------
// 9. end to end through the binary and the HTTP service

fn hybrag(ws: &Path, args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_hybrag"))
        .arg("--workspace")
        .arg(ws)
        .args(args)
        .env_remove("HETA_LLM_ENDPOINT")
        .env_remove("HETA_LLM_API_KEY")
        .output()
        .map_err(fail)?;
    if !out.status.success() {
        return Err(format!("hybrag {args:?} failed: {}", String::from_utf8_lossy(&out.stderr)));
    }
    String::from_utf8(out.stdout).map_err(fail)
}

struct Server(Child);

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn start_server(ws: &Path) -> Result<(Server, String), String> {
    let mut child = Command::new(env!("CARGO_BIN_EXE_hybrag"))
        .arg("--workspace")
        .arg(ws)
        .args(["serve", "--port", "0"])
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .map_err(fail)?;
    let stdout = child.stdout.take().unwrap();
    let server = Server(child);
    let mut line = String::new();
    BufReader::new(stdout).read_line(&mut line).map_err(fail)?;
    let addr = line
        .trim()
        .strip_prefix("listening on ")
        .ok_or_else(|| format!("unexpected server banner {line:?}"))?;
    Ok((server, format!("http://{addr}")))
}

fn c9_end_to_end() -> Outcome {
    let tmp = tempfile::tempdir().map_err(fail)?;
    let input = tmp.path().join("in");
    let ws = tmp.path().join("ws");
    std::fs::create_dir_all(&input).map_err(fail)?;
    let mut docs = two_hop_docs();
    docs.push(doc(
        "d3",
        &[
            (Modality::Text, "Z is a coastal city with a large port."),
            (Modality::Table, "year | visitors\n2020 | 5\n2021 | 7"),
        ],
    ));
    for d in &docs {
        std::fs::write(input.join(format!("{}.json", d.doc_id)), serde_json::to_string(d).unwrap()).map_err(fail)?;
    }
    hybrag(&ws, &["ingest", "--in", input.to_str().unwrap()])?;

    // Record gateway fixtures once in-process, then switch the workspace to
    // replay them.
    let question = "Where is the company founded by X headquartered?";
    let rec = record(Script::TwoHop);
    let cfg = WorkspaceConfig::default();
    let mut models = Models::from_config(&cfg).map_err(fail)?;
    models.provider = Some(Box::new(rec.clone()));
    index_all(&ws, &cfg, &models).map_err(fail)?;
    let mut w = Workspace::open_with(&ws, cfg).map_err(fail)?;
    w.models.provider = Some(Box::new(rec.clone()));
    w.ask(question).map_err(fail)?;
    std::fs::write(ws.join("fixtures.json"), rec.fixtures_json()).map_err(fail)?;
    std::fs::write(ws.join("config.toml"), "[gateway]\nkind = \"scripted\"\nfixtures_path = \"fixtures.json\"\n").map_err(fail)?;

    let first: IndexReport = serde_json::from_str(&hybrag(&ws, &["index"])?).map_err(fail)?;
    let second: IndexReport = serde_json::from_str(&hybrag(&ws, &["index"])?).map_err(fail)?;
    ensure!(first.snapshot_hash == second.snapshot_hash, "snapshot hash changed on reindex");
    ensure!(first.counts.vector == 4 && first.counts.tables == 1, "counts {:?}", first.counts);

    let cli: Json = serde_json::from_str(&hybrag(&ws, &["ask", question])?).map_err(fail)?;
    ensure!(cli["terminated_by"] == "sufficient", "cli answer {cli}");

    let (_server, base) = start_server(&ws)?;
    let client = reqwest::blocking::Client::new();
    let health: Json = client.get(format!("{base}/health")).send().map_err(fail)?.json().map_err(fail)?;
    ensure!(health["counts"] == serde_json::to_value(&first.counts).unwrap(), "health {health} vs report {:?}", first.counts);
    let http: Json = client
        .post(format!("{base}/v1/ask"))
        .json(&json!({ "question": question }))
        .send()
        .map_err(fail)?
        .json()
        .map_err(fail)?;
    ensure!(http == cli, "HTTP answer differs from CLI:\n{http}\n{cli}");
    let bad = client
        .post(format!("{base}/v1/search"))
        .json(&json!({ "query": "company", "alpha": 2 }))
        .send()
        .map_err(fail)?;
    ensure!(bad.status().as_u16() == 400, "alpha=2 gave {}", bad.status());
    let body: Json = bad.json().map_err(fail)?;
    ensure!(body["key"] == "alpha", "error body {body}");
    Ok(())
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("scoring formula and monotonicity", 1, c1_scoring),
        ("flat vector search equals brute-force cosine", 5, c2_vector),
        ("BM25 hand fixture and naive-scorer rankings", 5, c3_bm25),
        ("fusion boundaries, worked example, RRF scale invariance", 1, c4_fusion),
        ("table queries equal nested-loop evaluator", 10, c5_tables),
        ("graph communities, khop monotonicity, toy retrieval", 5, c6_graph),
        ("multi-hop golden trace and step budget", 5, c7_agent),
        ("report citation closure, assets, fact check", 5, c8_writer),
        ("CLI/HTTP parity, reindex idempotence, health counts", 30, c9_end_to_end),
    ];
    let mut failed = 0;
    for (i, (name, limit, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let elapsed = start.elapsed();
        let limit = Duration::from_secs(*limit);
        let result = result.and_then(|()| {
            if elapsed < limit {
                Ok(())
            } else {
                Err(format!("runtime {elapsed:.2?} over budget"))
            }
        });
        match result {
            Ok(()) => println!("PASS  criterion {}: {name} ({elapsed:.2?}, limit {limit:?})", i + 1),
            Err(e) => {
                failed += 1;
                println!("FAIL  criterion {}: {name} ({elapsed:.2?}, limit {limit:?}): {e}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
