//! Line-delimited JSON scorer protocol, its server loop over any byte
//! streams, and a client for external scorer processes.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};

use ced_core::ced::{Cell, ScoreMatrix};
use ced_core::{cross_entropy, AdaptConfig, BaseModel, Example, LmSettings, TargetModel};
use ced_core::lm::adapt_texts;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const VERSION: &str = "ced-scorer/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
pub enum Request {
    Hello { version: String },
    TrainBase { texts: Vec<String>, #[serde(default)] dev_texts: Vec<String> },
    Adapt { model_id: String, texts: Vec<String> },
    Score { model_id: String, text: String },
    Shutdown,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Response {
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub version: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ce_per_token: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl Response {
    fn ok() -> Self {
        Response { ok: true, ..Default::default() }
    }

    fn error(message: impl ToString) -> Self {
        Response {
            ok: false,
            error: Some(message.to_string()),
            ..Default::default()
        }
    }
}

/// Model operations any scorer backend provides. Model ids are opaque.
pub trait Scorer {
    fn train_base(&mut self, texts: &[String], dev_texts: &[String]) -> Result<String>;
    fn adapt(&mut self, model_id: &str, texts: &[String]) -> Result<String>;
    /// Mean negative log-likelihood per predicted token, and the token count.
    fn score(&mut self, model_id: &str, text: &str) -> Result<(f64, usize)>;
}

/// The built-in n-gram model behind the [`Scorer`] interface.
#[derive(Debug, Clone)]
pub struct BuiltinScorer {
    settings: LmSettings,
    adapt: AdaptConfig,
    base: Option<BaseModel>,
    targets: Vec<TargetModel>,
}

const BASE_ID: &str = "base";

impl BuiltinScorer {
    pub fn new(settings: LmSettings, adapt: AdaptConfig) -> Self {
        BuiltinScorer {
            settings,
            adapt,
            base: None,
            targets: Vec::new(),
        }
    }

    fn base(&self) -> Result<&BaseModel> {
        self.base
            .as_ref()
            .ok_or_else(|| Error::Bridge("train_base has not been called".into()))
    }
}

impl Default for BuiltinScorer {
    fn default() -> Self {
        BuiltinScorer::new(LmSettings::default(), AdaptConfig::default())
    }
}

impl Scorer for BuiltinScorer {
    fn train_base(&mut self, texts: &[String], dev_texts: &[String]) -> Result<String> {
        let texts: Vec<&str> = texts.iter().map(String::as_str).collect();
        let dev: Vec<&str> = dev_texts.iter().map(String::as_str).collect();
        self.base = Some(BaseModel::train(&texts, &dev, self.settings)?);
        self.targets.clear();
        Ok(BASE_ID.into())
    }

    fn adapt(&mut self, model_id: &str, texts: &[String]) -> Result<String> {
        if model_id != BASE_ID {
            return Err(Error::Bridge(format!("can only adapt the base model, got {model_id:?}")));
        }
        let base = self.base()?;
        let id = format!("t{}", self.targets.len());
        let texts: Vec<&str> = texts.iter().map(String::as_str).collect();
        let model = adapt_texts(base, vec![id.clone()], &texts, &self.adapt)?;
        self.targets.push(model);
        Ok(id)
    }

    fn score(&mut self, model_id: &str, text: &str) -> Result<(f64, usize)> {
        let base = self.base()?;
        let seq = base.encode(text);
        let ce = if model_id == BASE_ID {
            cross_entropy(base, &seq)
        } else {
            let target = model_id
                .strip_prefix('t')
                .and_then(|n| n.parse::<usize>().ok())
                .and_then(|n| self.targets.get(n))
                .ok_or_else(|| Error::Bridge(format!("unknown model id {model_id:?}")))?;
            cross_entropy(&target.bind(base)?, &seq)
        };
        Ok((ce, seq.predicted()))
    }
}

fn handle(backend: &mut impl Scorer, req: Request) -> Result<Response> {
    Ok(match req {
        Request::Hello { .. } => Response {
            version: Some(VERSION.into()),
            ..Response::ok()
        },
        Request::TrainBase { texts, dev_texts } => Response {
            model_id: Some(backend.train_base(&texts, &dev_texts)?),
            ..Response::ok()
        },
        Request::Adapt { model_id, texts } => Response {
            model_id: Some(backend.adapt(&model_id, &texts)?),
            ..Response::ok()
        },
        Request::Score { model_id, text } => {
            let (ce, tokens) = backend.score(&model_id, &text)?;
            Response {
                ce_per_token: Some(ce),
                tokens: Some(tokens),
                ..Response::ok()
            }
        }
        Request::Shutdown => Response::ok(),
    })
}

/// Answers requests in order until `shutdown` or end of input. A malformed
/// line gets exactly one error response; a session that does not open with a
/// matching `hello` gets one error response and is closed.
pub fn serve(input: impl BufRead, mut output: impl Write, backend: &mut impl Scorer) -> Result<()> {
    let mut greeted = false;
    for line in input.lines() {
        let line = line.map_err(|e| Error::Bridge(format!("read failed: {e}")))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str::<Request>(&line);
        let (resp, close) = match parsed {
            Err(e) => (Response::error(format!("malformed request: {e}")), !greeted),
            Ok(Request::Hello { version }) if version != VERSION => (
                Response::error(format!("unsupported protocol version {version:?}, expected {VERSION}")),
                true,
            ),
            Ok(req @ Request::Hello { .. }) => {
                greeted = true;
                (handle(backend, req)?, false)
            }
            Ok(_) if !greeted => (Response::error("protocol violation: hello must come first"), true),
            Ok(Request::Shutdown) => (Response::ok(), true),
            Ok(req) => (handle(backend, req).unwrap_or_else(Response::error), false),
        };
        let mut bytes = serde_json::to_vec(&resp).expect("response serializes");
        bytes.push(b'\n');
        output
            .write_all(&bytes)
            .and_then(|()| output.flush())
            .map_err(|e| Error::Bridge(format!("write failed: {e}")))?;
        if close {
            break;
        }
    }
    Ok(())
}

/// Client side of the protocol over any pair of streams.
pub struct ScorerClient<R, W> {
    reader: R,
    writer: W,
}

impl<R: BufRead, W: Write> ScorerClient<R, W> {
    /// Connects and performs the version handshake.
    pub fn connect(reader: R, writer: W) -> Result<Self> {
        let mut c = ScorerClient { reader, writer };
        let resp = c.call(&Request::Hello { version: VERSION.into() })?;
        match resp.version.as_deref() {
            Some(VERSION) => Ok(c),
            other => Err(Error::Bridge(format!("scorer speaks {other:?}, expected {VERSION}"))),
        }
    }

    pub fn call(&mut self, req: &Request) -> Result<Response> {
        let mut bytes = serde_json::to_vec(req).expect("request serializes");
        bytes.push(b'\n');
        self.writer
            .write_all(&bytes)
            .and_then(|()| self.writer.flush())
            .map_err(|e| Error::Bridge(format!("write failed: {e}")))?;
        let mut line = String::new();
        let n = self
            .reader
            .read_line(&mut line)
            .map_err(|e| Error::Bridge(format!("read failed: {e}")))?;
        if n == 0 {
            return Err(Error::Bridge("scorer closed the stream".into()));
        }
        let resp: Response = serde_json::from_str(&line)
            .map_err(|e| Error::Bridge(format!("malformed response {line:?}: {e}")))?;
        if !resp.ok {
            return Err(Error::Bridge(resp.error.unwrap_or_else(|| "request failed".into())));
        }
        Ok(resp)
    }

    pub fn shutdown(mut self) -> Result<()> {
        self.call(&Request::Shutdown).map(drop)
    }

    fn model_id(resp: Response) -> Result<String> {
        resp.model_id.ok_or_else(|| Error::Bridge("response lacks model_id".into()))
    }
}

impl<R: BufRead, W: Write> Scorer for ScorerClient<R, W> {
    fn train_base(&mut self, texts: &[String], dev_texts: &[String]) -> Result<String> {
        let resp = self.call(&Request::TrainBase {
            texts: texts.to_vec(),
            dev_texts: dev_texts.to_vec(),
        })?;
        Self::model_id(resp)
    }

    fn adapt(&mut self, model_id: &str, texts: &[String]) -> Result<String> {
        let resp = self.call(&Request::Adapt {
            model_id: model_id.into(),
            texts: texts.to_vec(),
        })?;
        Self::model_id(resp)
    }

    fn score(&mut self, model_id: &str, text: &str) -> Result<(f64, usize)> {
        let resp = self.call(&Request::Score {
            model_id: model_id.into(),
            text: text.into(),
        })?;
        match (resp.ce_per_token, resp.tokens) {
            (Some(ce), Some(n)) if ce.is_finite() => Ok((ce, n)),
            _ => Err(Error::Bridge("score response lacks a finite ce_per_token".into())),
        }
    }
}

/// An external scorer process speaking the protocol on its stdio.
pub struct BridgeProcess {
    client: Option<ScorerClient<BufReader<ChildStdout>, ChildStdin>>,
    child: Child,
}

impl BridgeProcess {
    pub fn spawn(command: &[String]) -> Result<Self> {
        let (program, args) = command
            .split_first()
            .ok_or_else(|| Error::Config("bridge scorer needs a command".into()))?;
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::Bridge(format!("cannot start {program:?}: {e}")))?;
        let stdin = child.stdin.take().expect("stdin piped");
        let stdout = BufReader::new(child.stdout.take().expect("stdout piped"));
        let client = ScorerClient::connect(stdout, stdin)?;
        Ok(BridgeProcess {
            client: Some(client),
            child,
        })
    }

    fn client(&mut self) -> &mut ScorerClient<BufReader<ChildStdout>, ChildStdin> {
        self.client.as_mut().expect("client present until drop")
    }

    /// Sends `shutdown` and waits for the process to exit.
    pub fn close(mut self) -> Result<()> {
        let client = self.client.take().expect("client present until drop");
        client.shutdown()?;
        let status = self
            .child
            .wait()
            .map_err(|e| Error::Bridge(format!("wait failed: {e}")))?;
        if status.success() {
            Ok(())
        } else {
            Err(Error::Bridge(format!("scorer exited with {status}")))
        }
    }
}

impl Drop for BridgeProcess {
    fn drop(&mut self) {
        if self.client.take().is_some() {
            let _ = self.child.kill();
            let _ = self.child.wait();
        }
    }
}

impl Scorer for BridgeProcess {
    fn train_base(&mut self, texts: &[String], dev_texts: &[String]) -> Result<String> {
        self.client().train_base(texts, dev_texts)
    }

    fn adapt(&mut self, model_id: &str, texts: &[String]) -> Result<String> {
        self.client().adapt(model_id, texts)
    }

    fn score(&mut self, model_id: &str, text: &str) -> Result<(f64, usize)> {
        self.client().score(model_id, text)
    }
}

/// One adaptation group: the model name in the matrix and its training texts.
pub struct TargetSpec {
    pub name: String,
    pub texts: Vec<String>,
}

/// Builds a score matrix entirely through `scorer`. Base texts and groups
/// mirror what the in-process pipeline trains on.
pub fn score_matrix_via(
    scorer: &mut impl Scorer,
    base_texts: &[String],
    dev_texts: &[String],
    targets: &[TargetSpec],
    tests: &[&Example],
) -> Result<ScoreMatrix> {
    let base = scorer.train_base(base_texts, dev_texts)?;
    let ids = targets
        .iter()
        .map(|t| scorer.adapt(&base, &t.texts))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::with_capacity(tests.len());
    for test in tests {
        let input = test.input_text();
        let (base_ce, _) = scorer.score(&base, &input)?;
        let row = ids
            .iter()
            .map(|id| Ok(Cell::new(base_ce, scorer.score(id, &input)?.0)))
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    Ok(ScoreMatrix::new(
        tests.iter().map(|t| t.id.clone()).collect(),
        targets.iter().map(|t| t.name.clone()).collect(),
        rows,
    )?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(input: &str) -> Vec<Response> {
        let mut out = Vec::new();
        serve(input.as_bytes(), &mut out, &mut BuiltinScorer::default()).unwrap();
        String::from_utf8(out)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect()
    }

    #[test]
    fn hello_echoes_version() {
        let r = run(r#"{"op":"hello","version":"ced-scorer/1"}"#);
        assert_eq!(r.len(), 1);
        assert!(r[0].ok);
        assert_eq!(r[0].version.as_deref(), Some(VERSION));
    }

    #[test]
    fn missing_hello_closes_after_one_error() {
        let r = run("{\"op\":\"shutdown\"}\n{\"op\":\"shutdown\"}\n");
        assert_eq!(r.len(), 1);
        assert!(!r[0].ok);
    }

    #[test]
    fn malformed_line_yields_one_error_and_session_continues() {
        let input = concat!(
            "{\"op\":\"hello\",\"version\":\"ced-scorer/1\"}\n",
            "not json\n",
            "{\"op\":\"score\",\"model_id\":\"base\",\"text\":\"x\"}\n",
            "{\"op\":\"shutdown\"}\n",
            "{\"op\":\"hello\",\"version\":\"ced-scorer/1\"}\n",
        );
        let r = run(input);
        let oks: Vec<bool> = r.iter().map(|x| x.ok).collect();
        assert_eq!(oks, [true, false, false, true]);
    }

    #[test]
    fn adapt_then_score_lowers_own_ce() {
        let mut s = BuiltinScorer::default();
        let texts = vec!["the cat sat on the mat".to_string(), "a dog ran in the park".to_string()];
        let base = s.train_base(&texts, &[]).unwrap();
        let t = s.adapt(&base, &texts[..1]).unwrap();
        let (b, n) = s.score(&base, &texts[0]).unwrap();
        let (a, m) = s.score(&t, &texts[0]).unwrap();
        assert_eq!(n, m);
        assert!(a < b);
    }
}
