//! Text ingestion and serialization of the dataset file formats.
//!
//! Edge file: one edge per line, `src  dst  [weight]  [ef_0 .. ef_{d_e-1}]`,
//! `#` comment lines skipped, missing weight defaults to 1.0.
//! Feature file: header `N d_in`, then `node_id f_0 .. f_{d_in-1}`.
//! Label file: `node_id class_id split` with split in {train, val, test}.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{CoreError, Result};
use crate::graph::{DatasetBundle, Graph, IngestOptions, NodeId};
use crate::tensor::{Real, Tensor};

fn io_err(path: &Path, source: std::io::Error) -> CoreError {
    CoreError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> CoreError {
    CoreError::Parse {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

struct EdgeRecords {
    edges: Vec<(NodeId, NodeId)>,
    weights: Vec<Real>,
    features: Option<Vec<Vec<Real>>>,
}

fn read_edge_file(path: &Path) -> Result<EdgeRecords> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut edges = Vec::new();
    let mut weights = Vec::new();
    let mut features: Option<Vec<Vec<Real>>> = None;
    let mut edge_dim: Option<usize> = None;

    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        let lineno = lineno + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if fields.len() < 2 {
            return Err(parse_err(path, lineno, "expected at least `src dst`"));
        }
        let src: NodeId = fields[0]
            .parse()
            .map_err(|_| parse_err(path, lineno, format!("bad source id `{}`", fields[0])))?;
        let dst: NodeId = fields[1]
            .parse()
            .map_err(|_| parse_err(path, lineno, format!("bad destination id `{}`", fields[1])))?;
        let weight: Real = if fields.len() >= 3 {
            fields[2]
                .parse()
                .map_err(|_| parse_err(path, lineno, format!("bad weight `{}`", fields[2])))?
        } else {
            1.0
        };
        let efeat: Vec<Real> = fields
            .get(3..)
            .unwrap_or(&[])
            .iter()
            .map(|f| {
                f.parse()
                    .map_err(|_| parse_err(path, lineno, format!("bad edge feature `{f}`")))
            })
            .collect::<Result<_>>()?;
        match edge_dim {
            None => edge_dim = Some(efeat.len()),
            Some(d) if d != efeat.len() => {
                return Err(parse_err(
                    path,
                    lineno,
                    format!("edge feature arity {} != {}", efeat.len(), d),
                ));
            }
            _ => {}
        }
        if !efeat.is_empty() {
            features.get_or_insert_with(Vec::new).push(efeat);
        }
        edges.push((src, dst));
        weights.push(weight);
    }
    Ok(EdgeRecords {
        edges,
        weights,
        features,
    })
}

fn read_feature_file(path: &Path) -> Result<Tensor> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut lines = BufReader::new(file).lines().enumerate();

    let (n, d) = loop {
        let Some((lineno, line)) = lines.next() else {
            return Err(parse_err(path, 1, "missing `N d_in` header"));
        };
        let line = line.map_err(|e| io_err(path, e))?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = t.split_whitespace().collect();
        if fields.len() != 2 {
            return Err(parse_err(path, lineno + 1, "header must be `N d_in`"));
        }
        let n: usize = fields[0]
            .parse()
            .map_err(|_| parse_err(path, lineno + 1, "bad N"))?;
        let d: usize = fields[1]
            .parse()
            .map_err(|_| parse_err(path, lineno + 1, "bad d_in"))?;
        break (n, d);
    };

    let mut feats = Tensor::zeros(n, d);
    let mut seen = vec![false; n];
    for (lineno, line) in lines {
        let line = line.map_err(|e| io_err(path, e))?;
        let lineno = lineno + 1;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let mut fields = t.split_whitespace();
        let id_str = fields.next().unwrap();
        let id: usize = id_str
            .parse()
            .map_err(|_| parse_err(path, lineno, format!("bad node id `{id_str}`")))?;
        if id >= n {
            return Err(CoreError::NodeRange {
                id: id as u64,
                bound: n as u64,
            });
        }
        if std::mem::replace(&mut seen[id], true) {
            return Err(CoreError::Duplicate {
                path: path.display().to_string(),
                line: lineno,
                id: id as u64,
            });
        }
        let row = feats.row_mut(id);
        let mut count = 0;
        for (j, f) in fields.enumerate() {
            if j >= d {
                return Err(parse_err(path, lineno, format!("more than {d} features")));
            }
            row[j] = f
                .parse()
                .map_err(|_| parse_err(path, lineno, format!("bad feature `{f}`")))?;
            count += 1;
        }
        if count != d {
            return Err(parse_err(
                path,
                lineno,
                format!("expected {d} features, got {count}"),
            ));
        }
    }
    Ok(feats)
}

struct LabelRecords {
    labels: Vec<Option<u32>>,
    train: Vec<NodeId>,
    val: Vec<NodeId>,
    test: Vec<NodeId>,
    class_count: usize,
}

fn read_label_file(path: &Path, n: usize) -> Result<LabelRecords> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut labels = vec![None; n];
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    let mut class_count = 0usize;
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        let lineno = lineno + 1;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = t.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(parse_err(path, lineno, "expected `node_id class_id split`"));
        }
        let id: NodeId = fields[0]
            .parse()
            .map_err(|_| parse_err(path, lineno, "bad node id"))?;
        if id as usize >= n {
            return Err(CoreError::NodeRange {
                id: id as u64,
                bound: n as u64,
            });
        }
        let class: u32 = fields[1]
            .parse()
            .map_err(|_| parse_err(path, lineno, "bad class id"))?;
        if labels[id as usize].is_some() {
            return Err(CoreError::Duplicate {
                path: path.display().to_string(),
                line: lineno,
                id: id as u64,
            });
        }
        labels[id as usize] = Some(class);
        class_count = class_count.max(class as usize + 1);
        match fields[2] {
            "train" => train.push(id),
            "val" => val.push(id),
            "test" => test.push(id),
            other => {
                return Err(parse_err(path, lineno, format!("unknown split `{other}`")));
            }
        }
    }
    for mask in [&mut train, &mut val, &mut test] {
        mask.sort_unstable();
    }
    Ok(LabelRecords {
        labels,
        train,
        val,
        test,
        class_count,
    })
}

/// Loads a dataset from the three text files, applying the symmetrization
/// and self-loop policy.
pub fn load_dataset(
    edge_path: impl AsRef<Path>,
    feature_path: impl AsRef<Path>,
    label_path: impl AsRef<Path>,
    options: IngestOptions,
) -> Result<DatasetBundle> {
    let features = read_feature_file(feature_path.as_ref())?;
    let n = features.rows();
    let mut rec = read_edge_file(edge_path.as_ref())?;

    if options.symmetrize {
        let m = rec.edges.len();
        for i in 0..m {
            let (s, d) = rec.edges[i];
            rec.edges.push((d, s));
            let w = rec.weights[i];
            rec.weights.push(w);
            if let Some(f) = &mut rec.features {
                let row = f[i].clone();
                f.push(row);
            }
        }
    }
    if options.add_self_loops {
        let d_e = rec.features.as_ref().map_or(0, |f| f[0].len());
        for v in 0..n as NodeId {
            rec.edges.push((v, v));
            rec.weights.push(1.0);
            if let Some(f) = &mut rec.features {
                f.push(vec![0.0; d_e]);
            }
        }
    }

    let edge_features = rec.features.map(|rows| {
        let d = rows[0].len();
        let flat: Vec<Real> = rows.into_iter().flatten().collect();
        Tensor::from_vec(flat.len() / d, d, flat)
    });

    let lab = read_label_file(label_path.as_ref(), n)?;
    let graph = Graph::from_edges(
        n,
        rec.edges,
        rec.weights,
        edge_features,
        features,
        lab.labels,
    )?;
    let bundle = DatasetBundle {
        graph,
        train_mask: lab.train,
        validation_mask: lab.val,
        test_mask: lab.test,
        class_count: lab.class_count,
    };
    bundle.check_masks()?;
    Ok(bundle)
}

/// Writes a graph back to the edge-list format (weights and edge features
/// included). Round-trips with [`load_dataset`] under `symmetrize = off`.
pub fn write_edge_file(path: impl AsRef<Path>, graph: &Graph) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    (|| -> std::io::Result<()> {
        for (eid, &(s, d)) in graph.edges.iter().enumerate() {
            write!(w, "{s}\t{d}\t{}", fmt_real(graph.edge_weights[eid]))?;
            if let Some(f) = &graph.edge_features {
                for v in f.row(eid) {
                    write!(w, "\t{}", fmt_real(*v))?;
                }
            }
            writeln!(w)?;
        }
        w.flush()
    })()
    .map_err(|e| io_err(path, e))
}

pub fn write_feature_file(path: impl AsRef<Path>, graph: &Graph) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    (|| -> std::io::Result<()> {
        writeln!(w, "{} {}", graph.num_nodes, graph.feature_dim())?;
        for v in 0..graph.num_nodes {
            write!(w, "{v}")?;
            for f in graph.node_features.row(v) {
                write!(w, "\t{}", fmt_real(*f))?;
            }
            writeln!(w)?;
        }
        w.flush()
    })()
    .map_err(|e| io_err(path, e))
}

pub fn write_label_file(path: impl AsRef<Path>, bundle: &DatasetBundle) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    (|| -> std::io::Result<()> {
        for (split, mask) in [
            ("train", &bundle.train_mask),
            ("val", &bundle.validation_mask),
            ("test", &bundle.test_mask),
        ] {
            for &v in mask.iter() {
                let class = bundle.graph.labels[v as usize]
                    .expect("masked node must be labeled");
                writeln!(w, "{v}\t{class}\t{split}")?;
            }
        }
        w.flush()
    })()
    .map_err(|e| io_err(path, e))
}

/// Shortest decimal that round-trips (`{}` formatting is exact for f64).
fn fmt_real(v: Real) -> String {
    format!("{v}")
}
