//! Registry checkpoints.
//!
//! Plain UTF-8 text, one item per line:
//!
//! ```text
//! fedet-checkpoint 1
//! assignment <count>
//! <client_id> <model_id>            (count lines)
//! model <name> <layer_count>        (name is `server` or the small model id)
//! layer <out> <in> <activation>     (layer_count lines)
//! ...                               (one model block per model, server first)
//! end-manifest
//! tensor <name>.<layer>.weights <len>
//! <len space-separated values>
//! tensor <name>.<layer>.bias <len>
//! <len space-separated values>
//! ...
//! ```
//!
//! Values use Rust's shortest round-trip float formatting, so loading a saved
//! checkpoint reproduces every parameter bit for bit. Saves go to a temporary
//! file in the target directory that is renamed into place.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use crate::error::{FedError, Result};
use crate::model::{HeterogeneousModel, ModelRegistry};
use crate::numerics::{Activation, DenseLayer, Tensor};

const MAGIC: &str = "fedet-checkpoint 1";

fn models_in_order(registry: &ModelRegistry) -> Vec<(String, &HeterogeneousModel)> {
    let mut out = vec![("server".to_string(), &registry.server_model)];
    out.extend(
        registry
            .small_models
            .iter()
            .map(|(id, m)| (id.to_string(), m)),
    );
    out
}

pub fn render(registry: &ModelRegistry) -> String {
    let mut s = String::new();
    s.push_str(MAGIC);
    s.push('\n');
    s.push_str(&format!("assignment {}\n", registry.assignment.len()));
    for (client, id) in &registry.assignment {
        s.push_str(&format!("{client} {id}\n"));
    }
    let models = models_in_order(registry);
    for (name, m) in &models {
        s.push_str(&format!("model {name} {}\n", m.layers().len()));
        for l in m.layers() {
            s.push_str(&format!(
                "layer {} {} {}\n",
                l.out_dim(),
                l.in_dim(),
                l.activation.name()
            ));
        }
    }
    s.push_str("end-manifest\n");
    for (name, m) in &models {
        for (i, l) in m.layers().iter().enumerate() {
            for (kind, t) in [("weights", &l.weights), ("bias", &l.bias)] {
                s.push_str(&format!("tensor {name}.{i}.{kind} {}\n", t.len()));
                let values: Vec<String> = t.data().iter().map(|v| format!("{v:?}")).collect();
                s.push_str(&values.join(" "));
                s.push('\n');
            }
        }
    }
    s
}

/// Atomic save: write a sibling temp file, then rename over `path`.
pub fn save(registry: &ModelRegistry, path: &Path) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| FedError::io(dir, e))?;
    tmp.write_all(render(registry).as_bytes())
        .and_then(|_| tmp.as_file().sync_all())
        .map_err(|e| FedError::io(tmp.path(), e))?;
    tmp.persist(path).map_err(|e| FedError::io(path, e.error))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ModelRegistry> {
    let text = std::fs::read_to_string(path).map_err(|e| FedError::io(path, e))?;
    parse(&text)
}

/// Loads and checks that the result matches `expected`'s shapes.
pub fn load_matching(path: &Path, expected: &ModelRegistry) -> Result<ModelRegistry> {
    let loaded = load(path)?;
    expected.check_compatible(&loaded)?;
    Ok(loaded)
}

fn manifest_err(message: impl Into<String>) -> FedError {
    FedError::Checkpoint {
        tensor: "manifest".into(),
        message: message.into(),
    }
}

struct LayerShape {
    out: usize,
    inp: usize,
    activation: Activation,
}

pub fn parse(text: &str) -> Result<ModelRegistry> {
    let mut lines = text.lines();
    if lines.next() != Some(MAGIC) {
        return Err(manifest_err("missing `fedet-checkpoint 1` header"));
    }

    let mut next_fields = |what: &str| -> Result<Vec<String>> {
        lines
            .next()
            .map(|l| l.split_whitespace().map(str::to_string).collect())
            .ok_or_else(|| manifest_err(format!("unexpected end of file, expected {what}")))
    };
    let num = |s: &str| -> Result<usize> {
        s.parse()
            .map_err(|_| manifest_err(format!("expected an integer, found `{s}`")))
    };

    let head = next_fields("assignment")?;
    if head.len() != 2 || head[0] != "assignment" {
        return Err(manifest_err("expected `assignment <count>`"));
    }
    let mut assignment = BTreeMap::new();
    for _ in 0..num(&head[1])? {
        let f = next_fields("assignment entry")?;
        if f.len() != 2 {
            return Err(manifest_err("assignment entry needs `<client> <model>`"));
        }
        assignment.insert(num(&f[0])?, num(&f[1])?);
    }

    let mut manifest: Vec<(String, Vec<LayerShape>)> = Vec::new();
    loop {
        let f = next_fields("model block or end-manifest")?;
        if f.len() == 1 && f[0] == "end-manifest" {
            break;
        }
        if f.len() != 3 || f[0] != "model" {
            return Err(manifest_err(format!(
                "expected `model <name> <layers>`, got {f:?}"
            )));
        }
        let mut shapes = Vec::new();
        for _ in 0..num(&f[2])? {
            let l = next_fields("layer entry")?;
            if l.len() != 4 || l[0] != "layer" {
                return Err(manifest_err(format!("bad layer entry {l:?}")));
            }
            let activation = Activation::from_name(&l[3])
                .ok_or_else(|| manifest_err(format!("unknown activation `{}`", l[3])))?;
            shapes.push(LayerShape {
                out: num(&l[1])?,
                inp: num(&l[2])?,
                activation,
            });
        }
        manifest.push((f[1].clone(), shapes));
    }

    let mut read_tensor = |name: String, shape: Vec<usize>| -> Result<Tensor> {
        let err = |message: String| FedError::Checkpoint {
            tensor: name.clone(),
            message,
        };
        let header = lines
            .next()
            .ok_or_else(|| err("tensor missing from file".into()))?;
        let expected_len: usize = shape.iter().product();
        let want = format!("tensor {name} {expected_len}");
        if header.trim() != want {
            return Err(err(format!("expected header `{want}`, found `{header}`")));
        }
        let body = lines.next().ok_or_else(|| err("values missing".into()))?;
        let values = body
            .split_whitespace()
            .map(|v| {
                v.parse::<f64>()
                    .ok()
                    .filter(|x| x.is_finite())
                    .ok_or_else(|| err(format!("bad value `{v}`")))
            })
            .collect::<Result<Vec<f64>>>()?;
        if values.len() != expected_len {
            return Err(err(format!(
                "manifest declares {expected_len} values, found {}",
                values.len()
            )));
        }
        Tensor::new(shape, values).map_err(|e| err(e.to_string()))
    };

    let mut server = None;
    let mut small_models = BTreeMap::new();
    for (name, shapes) in manifest {
        let mut layers = Vec::with_capacity(shapes.len());
        for (i, s) in shapes.iter().enumerate() {
            let weights = read_tensor(format!("{name}.{i}.weights"), vec![s.out, s.inp])?;
            let bias = read_tensor(format!("{name}.{i}.bias"), vec![s.out])?;
            layers.push(DenseLayer::new(weights, bias, s.activation)?);
        }
        let model = HeterogeneousModel::from_layers(layers).map_err(|e| FedError::Checkpoint {
            tensor: name.clone(),
            message: e.to_string(),
        })?;
        if name == "server" {
            server = Some(model);
        } else {
            let id = name
                .parse::<usize>()
                .map_err(|_| manifest_err(format!("bad model name `{name}`")))?;
            small_models.insert(id, model);
        }
    }
    let server_model = server.ok_or_else(|| manifest_err("no server model"))?;
    ModelRegistry {
        small_models,
        server_model,
        assignment: BTreeMap::new(),
    }
    .with_assignment(assignment)
}
