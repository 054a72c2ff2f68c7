//! Synthetic corpora, byte tokenizer and sequence layout.
//!
//! Every example is laid out as `[BOS, input…, SEP, response…, EOS]`.
//! The model reads all but the final token; position `i` predicts token
//! `i + 1`.

use std::collections::HashSet;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::Rng;
use rand_pcg::Pcg64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::SpanMasks;
use crate::rng::{permutation, rng, Stream};

pub const BOS: usize = 256;
pub const EOS: usize = 257;
pub const SEP: usize = 258;
pub const PAD: usize = 259;
pub const VOCAB_SIZE: usize = 260;

/// Response emitted when the context does not contain the answer.
pub const ABSTAIN: &str = "NOANSWER";

/// Byte-level tokenizer with four reserved ids above the byte range.
#[derive(Clone, Copy, Debug, Default)]
pub struct Tokenizer;

impl Tokenizer {
    pub fn encode(&self, text: &[u8]) -> Vec<usize> {
        text.iter().map(|&b| b as usize).collect()
    }

    /// Bytes for the plain-byte ids; reserved ids are dropped.
    pub fn decode(&self, ids: &[usize]) -> Vec<u8> {
        ids.iter().filter(|&&t| t < 256).map(|&t| t as u8).collect()
    }

    pub fn decode_lossy(&self, ids: &[usize]) -> String {
        String::from_utf8_lossy(&self.decode(ids)).into_owned()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    GeneralInstruction,
    RagQa,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub seed: u64,
    pub n_examples: usize,
    pub n_docs: usize,
    /// Bytes per document.
    pub doc_len: usize,
    pub distractor_rate: f64,
    pub unanswerable_rate: f64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec {
            kind: TaskKind::GeneralInstruction,
            seed: 0,
            n_examples: 1000,
            n_docs: 2,
            doc_len: 28,
            distractor_rate: 0.5,
            unanswerable_rate: 0.2,
        }
    }
}

/// The answer is one uppercase byte placed in a document of lowercase filler.
const ANSWER_LEN: usize = 1;
/// `|?i` with `i` a hex digit naming the document.
const QUESTION_LEN: usize = 3;
/// Largest document count a one-digit question can address.
pub const MAX_DOCS: usize = 16;
/// Shortest document that still holds an answer between filler bytes.
const MIN_DOC_LEN: usize = ANSWER_LEN + 2;
/// The four context presets and their document layout.
pub const CTX_LENS: [usize; 4] = [64, 128, 256, 448];

impl TaskSpec {
    pub fn general(seed: u64, n_examples: usize) -> Self {
        TaskSpec {
            kind: TaskKind::GeneralInstruction,
            seed,
            n_examples,
            ..TaskSpec::default()
        }
    }

    /// A rag_qa spec whose input length is close to `ctx_len` bytes.
    pub fn rag_for_ctx(seed: u64, n_examples: usize, ctx_len: usize) -> Self {
        let n_docs = (ctx_len / 32).max(1);
        let doc_len = ((ctx_len + 1).saturating_sub(QUESTION_LEN + n_docs) / n_docs).max(MIN_DOC_LEN);
        TaskSpec {
            kind: TaskKind::RagQa,
            seed,
            n_examples,
            n_docs,
            doc_len,
            ..TaskSpec::default()
        }
    }

    /// Input length in bytes of every rag_qa example under this spec.
    pub fn rag_input_len(&self) -> usize {
        self.n_docs * self.doc_len + (self.n_docs - 1) + QUESTION_LEN
    }

    pub fn validate(&self, max_seq_len: usize) -> Result<()> {
        let rate = |name: &str, r: f64| {
            if (0.0..=1.0).contains(&r) {
                Ok(())
            } else {
                Err(Error::TaskSpec(format!("{name} must lie in [0, 1], got {r}")))
            }
        };
        rate("distractor_rate", self.distractor_rate)?;
        rate("unanswerable_rate", self.unanswerable_rate)?;
        if self.n_examples == 0 {
            return Err(Error::TaskSpec("n_examples must be positive".into()));
        }
        if self.kind == TaskKind::RagQa {
            if self.n_docs == 0 || self.n_docs > MAX_DOCS {
                return Err(Error::TaskSpec(format!("n_docs must lie in 1..={MAX_DOCS}")));
            }
            if self.doc_len < MIN_DOC_LEN {
                return Err(Error::TaskSpec(format!("doc_len {} below minimum {MIN_DOC_LEN}", self.doc_len)));
            }
            let layout = self.rag_input_len() + ABSTAIN.len() + 3;
            if layout > max_seq_len {
                return Err(Error::TaskSpec(format!(
                    "{} docs of {} bytes need {layout} positions, max_seq_len is {max_seq_len}",
                    self.n_docs, self.doc_len
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Probe,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExampleMeta {
    /// Task family, e.g. `upper` or `rag_qa`.
    pub task: String,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainExample {
    pub input: String,
    pub response: String,
    pub meta: ExampleMeta,
}

impl TrainExample {
    pub fn input_tokens(&self) -> Vec<usize> {
        Tokenizer.encode(self.input.as_bytes())
    }

    pub fn response_tokens(&self) -> Vec<usize> {
        Tokenizer.encode(self.response.as_bytes())
    }

    /// `[BOS, input…, SEP]`: what the model sees before it answers.
    pub fn prompt(&self) -> Vec<usize> {
        let mut p = Vec::with_capacity(self.input.len() + 2);
        p.push(BOS);
        p.extend(self.input_tokens());
        p.push(SEP);
        p
    }

    /// Full layout `[BOS, input…, SEP, response…, EOS]`.
    pub fn layout(&self) -> Vec<usize> {
        let mut seq = self.prompt();
        seq.extend(self.response_tokens());
        seq.push(EOS);
        seq
    }

    /// Teacher-forced encoding without padding.
    pub fn encode(&self) -> EncodedExample {
        let seq = self.layout();
        let n = seq.len() - 1;
        let sep = self.input.len() + 1;
        EncodedExample {
            tokens: seq[..n].to_vec(),
            targets: seq[1..].to_vec(),
            masks: SpanMasks {
                input: (0..n).map(|i| i < sep).collect(),
                response: (0..n).map(|i| i >= sep).collect(),
                pad: vec![false; n],
            },
        }
    }

    /// Exact match of the tokens generated after the prompt against the gold
    /// response; the generation must be terminated by EOS.
    pub fn is_correct(&self, generated: &[usize]) -> bool {
        let body = match generated.iter().position(|&t| t == EOS) {
            Some(end) => &generated[..end],
            None => return false,
        };
        body.iter().all(|&t| t < 256) && Tokenizer.decode(body) == self.response.as_bytes()
    }
}

/// One teacher-forced row: `tokens[i]` is read, `targets[i]` is predicted.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedExample {
    pub tokens: Vec<usize>,
    pub targets: Vec<usize>,
    pub masks: SpanMasks,
}

impl EncodedExample {
    /// Unpadded length.
    pub fn len(&self) -> usize {
        self.masks.pad.iter().take_while(|&&p| !p).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Copy with trailing padding removed.
    pub fn trimmed(&self) -> EncodedExample {
        let n = self.len();
        EncodedExample {
            tokens: self.tokens[..n].to_vec(),
            targets: self.targets[..n].to_vec(),
            masks: SpanMasks {
                input: self.masks.input[..n].to_vec(),
                response: self.masks.response[..n].to_vec(),
                pad: vec![false; n],
            },
        }
    }
}

/// Right-pad each example's encoding to a common width. `max_len` bounds
/// the full layout (including the final EOS); `pad_to` defaults to the
/// longest row.
pub fn encode_batch(examples: &[TrainExample], max_len: usize, pad_to: Option<usize>) -> Result<Vec<EncodedExample>> {
    let mut rows = Vec::with_capacity(examples.len());
    for (index, ex) in examples.iter().enumerate() {
        let len = ex.input.len() + ex.response.len() + 3;
        if len > max_len {
            return Err(Error::Overflow { index, len, max: max_len });
        }
        rows.push(ex.encode());
    }
    let width = pad_to.unwrap_or_else(|| rows.iter().map(|r| r.tokens.len()).max().unwrap_or(0));
    for (index, row) in rows.iter_mut().enumerate() {
        let n = row.tokens.len();
        if n > width {
            return Err(Error::Overflow { index, len: n, max: width });
        }
        row.tokens.resize(width, PAD);
        row.targets.resize(width, PAD);
        row.masks.input.resize(width, false);
        row.masks.response.resize(width, false);
        row.masks.pad.resize(width, true);
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct Corpus {
    pub train: Vec<TrainExample>,
    pub probe: Vec<TrainExample>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.train.len() + self.probe.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn all(&self) -> impl Iterator<Item = &TrainExample> {
        self.train.iter().chain(&self.probe)
    }

    /// Write one JSON object per line: `{"input", "response", "meta": {"task", "split"}}`.
    pub fn export_jsonl(&self, mut out: impl Write) -> Result<()> {
        for ex in self.all() {
            serde_json::to_writer(&mut out, ex)?;
            out.write_all(b"\n").map_err(|e| Error::io("<jsonl>", e))?;
        }
        Ok(())
    }

    pub fn import_jsonl(input: impl BufRead) -> Result<Corpus> {
        let mut corpus = Corpus::default();
        for line in input.lines() {
            let line = line.map_err(|e| Error::io("<jsonl>", e))?;
            if line.trim().is_empty() {
                continue;
            }
            let ex: TrainExample = serde_json::from_str(&line)?;
            match ex.meta.split {
                Split::Train => corpus.train.push(ex),
                Split::Probe => corpus.probe.push(ex),
            }
        }
        Ok(corpus)
    }

    pub fn save_jsonl(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.export_jsonl(&mut w)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load_jsonl(path: &Path) -> Result<Corpus> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Corpus::import_jsonl(std::io::BufReader::new(file))
    }
}

fn lower_word(rng: &mut Pcg64, len: usize) -> String {
    (0..len).map(|_| rng.random_range(b'a'..=b'z') as char).collect()
}

/// General instruction families, each a transform of one lowercase word.
pub const GENERAL_FAMILIES: [&str; 4] = ["say", "upper", "rev", "twice"];

/// The gold output of a general-instruction family applied to `arg`.
pub fn general_answer(family: &str, arg: &str) -> Option<String> {
    Some(match family {
        "say" => arg.to_string(),
        "upper" => arg.to_ascii_uppercase(),
        "rev" => arg.chars().rev().collect(),
        "twice" => format!("{arg}{arg}"),
        _ => return None,
    })
}

/// Split deduplicated examples 80/20 into train and probe by a seeded shuffle.
fn split_corpus(mut examples: Vec<TrainExample>, seed: u64) -> Corpus {
    let order = permutation(&mut rng(seed, Stream::Split), examples.len());
    let n_probe = examples.len() / 5;
    let mut slots: Vec<Option<TrainExample>> = examples.drain(..).map(Some).collect();
    let mut corpus = Corpus::default();
    for (rank, idx) in order.into_iter().enumerate() {
        let mut ex = slots[idx].take().expect("permutation visits each index once");
        if rank < n_probe {
            ex.meta.split = Split::Probe;
            corpus.probe.push(ex);
        } else {
            corpus.train.push(ex);
        }
    }
    corpus
}

/// Templated formatting tasks over short strings. Deterministic in
/// the spec; train and probe never share an input.
pub fn gen_general(spec: &TaskSpec) -> Result<Corpus> {
    if spec.kind != TaskKind::GeneralInstruction {
        return Err(Error::TaskSpec("gen_general needs kind general_instruction".into()));
    }
    spec.validate(usize::MAX)?;
    let mut r = rng(spec.seed, Stream::Data);
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(spec.n_examples);
    while out.len() < spec.n_examples {
        let family = GENERAL_FAMILIES[r.random_range(0..GENERAL_FAMILIES.len())];
        let len = r.random_range(3..=5);
        let arg = lower_word(&mut r, len);
        let input = format!("{family}:{arg}");
        if !seen.insert(input.clone()) {
            continue;
        }
        let response = general_answer(family, &arg).expect("known family");
        out.push(TrainExample {
            input,
            response,
            meta: ExampleMeta {
                task: family.to_string(),
                split: Split::Train,
            },
        });
    }
    Ok(split_corpus(out, spec.seed))
}

/// Fill `len` bytes with lowercase filler words separated by single spaces.
/// First and last byte are letters.
fn filler(rng: &mut Pcg64, len: usize) -> String {
    let mut s = String::with_capacity(len);
    while s.len() < len {
        let last = s.len() + 1 == len;
        if !s.is_empty() && !last && !s.ends_with(' ') && rng.random_bool(0.25) {
            s.push(' ');
        } else {
            s.push(rng.random_range(b'a'..=b'z') as char);
        }
    }
    s
}

/// A document of exactly `doc_len` bytes: lowercase filler with `answer`
/// replacing one letter at a seeded offset.
fn document(rng: &mut Pcg64, doc_len: usize, answer: Option<u8>) -> String {
    let mut body = filler(rng, doc_len).into_bytes();
    if let Some(a) = answer {
        let letters: Vec<usize> = (0..doc_len).filter(|&i| body[i] != b' ').collect();
        body[letters[rng.random_range(0..letters.len())]] = a;
    }
    String::from_utf8(body).expect("ascii")
}

/// Retrieval QA: `n_docs` documents of lowercase filler joined by `|`, then
/// `|?i` naming document `i` (hex, 0-based). The answer is the uppercase byte
/// in that document, or the abstain string when it holds none. Other
/// documents carry their own uppercase byte with probability `distractor_rate`.
pub fn gen_rag(spec: &TaskSpec, max_seq_len: usize) -> Result<Corpus> {
    if spec.kind != TaskKind::RagQa {
        return Err(Error::TaskSpec("gen_rag needs kind rag_qa".into()));
    }
    spec.validate(max_seq_len)?;
    let mut r = rng(spec.seed ^ 0x5241_4751, Stream::Data);
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(spec.n_examples);
    while out.len() < spec.n_examples {
        let target = r.random_range(0..spec.n_docs);
        let answer = (!r.random_bool(spec.unanswerable_rate)).then(|| r.random_range(b'A'..=b'Z'));
        let docs: Vec<String> = (0..spec.n_docs)
            .map(|d| {
                let held = if d == target {
                    answer
                } else {
                    r.random_bool(spec.distractor_rate).then(|| r.random_range(b'A'..=b'Z'))
                };
                document(&mut r, spec.doc_len, held)
            })
            .collect();
        let input = format!("{}|?{target:x}", docs.join("|"));
        if !seen.insert(input.clone()) {
            continue;
        }
        out.push(TrainExample {
            input,
            response: answer.map_or_else(|| ABSTAIN.to_string(), |a| (a as char).to_string()),
            meta: ExampleMeta {
                task: "rag_qa".into(),
                split: Split::Train,
            },
        });
    }
    Ok(split_corpus(out, spec.seed ^ 0x5241_4751))
}

/// Dispatch on the spec kind.
pub fn generate(spec: &TaskSpec, max_seq_len: usize) -> Result<Corpus> {
    match spec.kind {
        TaskKind::GeneralInstruction => gen_general(spec),
        TaskKind::RagQa => gen_rag(spec, max_seq_len),
    }
}
