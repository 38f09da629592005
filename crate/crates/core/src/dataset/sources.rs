//! Rationale (language model) and image (search) clients.
//!
//! Implementations must be callable from several worker threads at once.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde_json::Value;

use super::loader::mock_image_ref;
use super::templates::{parse_image_query, parse_query_subject};
use crate::error::{Error, Result};
use crate::hash::fnv1a64;
use crate::synthetic;

/// Environment variable holding the language-model API key.
pub const LLM_KEY_ENV: &str = "WHYPROMPT_LLM_KEY";

/// Free-form text completion.
pub trait RationaleSource: Send + Sync {
    fn complete(&self, prompt: &str) -> Result<String>;
}

/// Image bytes returned by an [`ImageSource`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RetrievedImage {
    pub image_ref: String,
    pub bytes: Vec<u8>,
}

/// Image search. May return duplicates; must return at most `limit` results.
pub trait ImageSource: Send + Sync {
    fn search(&self, query: &str, limit: usize) -> Result<Vec<RetrievedImage>>;
}

const MOCK_VOCABULARY: &[&str] = &[
    "four legs",
    "a tail",
    "fur",
    "whiskers",
    "wings",
    "wheels",
    "feathers",
    "stripes",
    "spots",
    "a beak",
    "scales",
    "a long neck",
    "pointed ears",
    "a metal body",
    "windows",
    "a round shape",
];

/// Offline rationale source. Answers from a fixture keyed by the question's
/// subject (`"dog"`, or `"four legs of a dog"` for sub-rationale questions);
/// subjects missing from the fixture get `fallback_count` items picked
/// deterministically from a small vocabulary, or an empty answer when
/// `fallback_count` is zero.
#[derive(Debug, Clone, Default)]
pub struct MockRationaleSource {
    fixture: BTreeMap<String, String>,
    fallback_count: usize,
}

impl MockRationaleSource {
    pub fn new(fixture: BTreeMap<String, String>, fallback_count: usize) -> Self {
        MockRationaleSource {
            fixture,
            fallback_count: fallback_count.min(MOCK_VOCABULARY.len()),
        }
    }

    /// Only procedural answers.
    pub fn procedural(count: usize) -> Self {
        MockRationaleSource::new(BTreeMap::new(), count)
    }

    /// Reads a JSON object mapping subjects to completions. Values may be a
    /// string (the raw completion) or a list of rationale strings.
    pub fn from_fixture_file(path: &Path, fallback_count: usize) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let json: BTreeMap<String, Value> =
            serde_json::from_str(&text).map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
        let mut fixture = BTreeMap::new();
        for (subject, value) in json {
            let completion = match value {
                Value::String(s) => s,
                Value::Array(items) => items
                    .iter()
                    .map(|v| {
                        v.as_str()
                            .map(|s| format!("- {s}"))
                            .ok_or_else(|| Error::format(format!("fixture entry for {subject:?} is not a string list")))
                    })
                    .collect::<Result<Vec<_>>>()?
                    .join("\n"),
                _ => return Err(Error::format(format!("fixture entry for {subject:?} must be a string or list"))),
            };
            fixture.insert(subject.trim().to_lowercase(), completion);
        }
        Ok(MockRationaleSource::new(fixture, fallback_count))
    }
}

impl RationaleSource for MockRationaleSource {
    fn complete(&self, prompt: &str) -> Result<String> {
        let subject = parse_query_subject(prompt)
            .ok_or_else(|| Error::Source(format!("mock source cannot read prompt {prompt:?}")))?
            .trim()
            .to_lowercase();
        if let Some(answer) = self.fixture.get(&subject) {
            return Ok(answer.clone());
        }
        let n = MOCK_VOCABULARY.len();
        let start = (fnv1a64(subject.as_bytes()) % n as u64) as usize;
        // the completion continues the "-" primer, so the first item has no marker
        let items: Vec<&str> = (0..self.fallback_count).map(|i| MOCK_VOCABULARY[(start + i) % n]).collect();
        Ok(items.join("\n- "))
    }
}

/// Offline image source producing procedural images (binary PPM) whose
/// pattern is keyed by the (category, rationale) recovered from the query.
#[derive(Debug, Clone)]
pub struct MockImageSource {
    pub per_query: usize,
    pub size: usize,
}

impl Default for MockImageSource {
    fn default() -> Self {
        MockImageSource { per_query: 4, size: 32 }
    }
}

impl ImageSource for MockImageSource {
    fn search(&self, query: &str, limit: usize) -> Result<Vec<RetrievedImage>> {
        let (category, rationale) =
            parse_image_query(query).ok_or_else(|| Error::Source(format!("mock source cannot read query {query:?}")))?;
        let base = fnv1a64(query.as_bytes()) & 0xffff_ffff;
        Ok((0..self.per_query.min(limit) as u64)
            .map(|i| {
                let instance = (base << 16) | i;
                let image = synthetic::render(&category, &rationale, instance, self.size);
                RetrievedImage {
                    image_ref: mock_image_ref(&category, &rationale, instance),
                    bytes: synthetic::encode_ppm(&image),
                }
            })
            .collect())
    }
}

/// Local folder tree `<root>/<category>/<rationale>/*`. Directory names may
/// use spaces or underscores.
#[derive(Debug, Clone)]
pub struct DirImageSource {
    root: PathBuf,
}

impl DirImageSource {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        DirImageSource { root: root.into() }
    }

    fn find_dir(parent: &Path, name: &str) -> Option<PathBuf> {
        [name.to_string(), name.replace(' ', "_")]
            .into_iter()
            .map(|n| parent.join(n))
            .find(|p| p.is_dir())
    }
}

impl ImageSource for DirImageSource {
    fn search(&self, query: &str, limit: usize) -> Result<Vec<RetrievedImage>> {
        let (category, rationale) =
            parse_image_query(query).ok_or_else(|| Error::Source(format!("cannot map query {query:?} to a folder")))?;
        let Some(dir) = Self::find_dir(&self.root, &category).and_then(|c| Self::find_dir(&c, &rationale)) else {
            return Ok(Vec::new());
        };
        let mut files: Vec<PathBuf> = fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|entry| entry.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        files
            .into_iter()
            .take(limit)
            .map(|path| {
                let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
                Ok(RetrievedImage {
                    image_ref: path.to_string_lossy().into_owned(),
                    bytes,
                })
            })
            .collect()
    }
}

fn http_client() -> Result<reqwest::blocking::Client> {
    reqwest::blocking::Client::builder()
        .timeout(Duration::from_secs(60))
        .build()
        .map_err(|e| Error::Source(format!("http client: {e}")))
}

fn encode_query_component(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for b in s.bytes() {
        match b {
            b'A'..=b'Z' | b'a'..=b'z' | b'0'..=b'9' | b'-' | b'_' | b'.' | b'~' => out.push(b as char),
            _ => out.push_str(&format!("%{b:02X}")),
        }
    }
    out
}

/// Generic search endpoint. `url_template` may contain `{query}` (URL-encoded
/// on substitution) and `{limit}`. The response must be JSON: a list of image
/// URLs, a list of objects with a `url` field, or an object holding such a
/// list under `results` or `images`. Each URL is then fetched.
#[derive(Debug, Clone)]
pub struct HttpImageSource {
    url_template: String,
    client: reqwest::blocking::Client,
}

impl HttpImageSource {
    pub fn new(url_template: impl Into<String>) -> Result<Self> {
        let url_template = url_template.into();
        if !url_template.contains("{query}") {
            return Err(Error::Config("http image source URL template needs a {query} placeholder".into()));
        }
        Ok(HttpImageSource {
            url_template,
            client: http_client()?,
        })
    }

    fn image_urls(body: &Value) -> Result<Vec<String>> {
        let list = match body {
            Value::Array(items) => items,
            Value::Object(map) => map
                .get("results")
                .or_else(|| map.get("images"))
                .and_then(Value::as_array)
                .ok_or_else(|| Error::Source("search response has no results list".into()))?,
            _ => return Err(Error::Source("search response is not a list".into())),
        };
        list.iter()
            .map(|item| match item {
                Value::String(s) => Ok(s.clone()),
                Value::Object(o) => o
                    .get("url")
                    .and_then(Value::as_str)
                    .map(str::to_string)
                    .ok_or_else(|| Error::Source("search result has no url".into())),
                _ => Err(Error::Source("unexpected search result entry".into())),
            })
            .collect()
    }
}

impl ImageSource for HttpImageSource {
    fn search(&self, query: &str, limit: usize) -> Result<Vec<RetrievedImage>> {
        let url = self
            .url_template
            .replace("{query}", &encode_query_component(query))
            .replace("{limit}", &limit.to_string());
        let body: Value = self
            .client
            .get(&url)
            .send()
            .and_then(|r| r.error_for_status())
            .and_then(|r| r.json())
            .map_err(|e| Error::Source(format!("search {url}: {e}")))?;
        let mut out = Vec::new();
        for image_url in Self::image_urls(&body)?.into_iter().take(limit) {
            match self
                .client
                .get(&image_url)
                .send()
                .and_then(|r| r.error_for_status())
                .and_then(|r| r.bytes())
            {
                Ok(bytes) => out.push(RetrievedImage {
                    image_ref: image_url,
                    bytes: bytes.to_vec(),
                }),
                Err(e) => log::warn!("skipping image {image_url}: {e}"),
            }
        }
        Ok(out)
    }
}

/// Chat-completions client for OpenAI-compatible servers. The API key comes
/// from [`LLM_KEY_ENV`].
#[derive(Debug, Clone)]
pub struct OpenAiCompatibleSource {
    endpoint: String,
    model: String,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
}

impl OpenAiCompatibleSource {
    /// `base_url` is the API root, e.g. `https://api.openai.com/v1`.
    pub fn new(base_url: &str, model: impl Into<String>, api_key: Option<String>) -> Result<Self> {
        Ok(OpenAiCompatibleSource {
            endpoint: format!("{}/chat/completions", base_url.trim_end_matches('/')),
            model: model.into(),
            api_key,
            client: http_client()?,
        })
    }

    pub fn from_env(base_url: &str, model: impl Into<String>) -> Result<Self> {
        let key = std::env::var(LLM_KEY_ENV).ok().filter(|k| !k.is_empty());
        if key.is_none() {
            log::warn!("{LLM_KEY_ENV} is not set; sending requests without an API key");
        }
        OpenAiCompatibleSource::new(base_url, model, key)
    }
}

impl RationaleSource for OpenAiCompatibleSource {
    fn complete(&self, prompt: &str) -> Result<String> {
        let request = serde_json::json!({
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": 0,
        });
        let mut builder = self.client.post(&self.endpoint).json(&request);
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        let body: Value = builder
            .send()
            .and_then(|r| r.error_for_status())
            .and_then(|r| r.json())
            .map_err(|e| Error::Source(format!("completion request: {e}")))?;
        body.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| Error::Source("completion response has no choices[0].message.content".into()))
    }
}

#[cfg(test)]
mod tests {
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::thread;

    use super::*;
    use crate::dataset::{render_image_queries, render_rationale_query};

    /// Serves `responses` in order, one per connection, and returns the raw
    /// requests.
    fn serve(responses: Vec<(&'static str, Vec<u8>)>) -> (String, thread::JoinHandle<Vec<String>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = format!("http://{}", listener.local_addr().unwrap());
        let handle = thread::spawn(move || {
            let mut requests = Vec::new();
            for (content_type, body) in responses {
                let (stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream);
                let mut head = String::new();
                let mut content_length = 0;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        content_length = v.trim().parse().unwrap();
                    }
                    head.push_str(&line);
                    if line == "\r\n" || line.is_empty() {
                        break;
                    }
                }
                let mut body_in = vec![0; content_length];
                reader.read_exact(&mut body_in).unwrap();
                head.push_str(&String::from_utf8_lossy(&body_in));
                requests.push(head);
                let mut stream = reader.into_inner();
                write!(
                    stream,
                    "HTTP/1.1 200 OK\r\nContent-Type: {content_type}\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
                    body.len()
                )
                .unwrap();
                stream.write_all(&body).unwrap();
            }
            requests
        });
        (addr, handle)
    }

    #[test]
    fn mock_rationales_from_fixture_and_fallback() {
        let mut fixture = BTreeMap::new();
        fixture.insert("dog".to_string(), "- four legs\n- a tail".to_string());
        let source = MockRationaleSource::new(fixture, 3);
        assert_eq!(source.complete(&render_rationale_query("dog").unwrap()).unwrap(), "- four legs\n- a tail");
        let fallback = source.complete(&render_rationale_query("cat").unwrap()).unwrap();
        assert_eq!(fallback.lines().count(), 3);
        assert_eq!(fallback, source.complete(&render_rationale_query("cat").unwrap()).unwrap());
        assert_eq!(MockRationaleSource::procedural(0).complete(&render_rationale_query("cat").unwrap()).unwrap(), "");
        assert!(source.complete("hello").is_err());
    }

    #[test]
    fn mock_images_respect_limit_and_differ_per_query() {
        let source = MockImageSource { per_query: 80, size: 16 };
        let queries = render_image_queries("dog", "four legs").unwrap();
        let a = source.search(&queries[0], 50).unwrap();
        assert_eq!(a.len(), 50);
        let b = source.search(&queries[1], 5).unwrap();
        assert!(a.iter().all(|x| b.iter().all(|y| x.bytes != y.bytes)));
        assert!(a[0].image_ref.starts_with("mock://"));
    }

    #[test]
    fn dir_source_reads_sorted_files() {
        let dir = tempfile::tempdir().unwrap();
        let leaf = dir.path().join("dog").join("four_legs");
        fs::create_dir_all(&leaf).unwrap();
        for name in ["b.png", "a.png", "c.png"] {
            fs::write(leaf.join(name), name.as_bytes()).unwrap();
        }
        let source = DirImageSource::new(dir.path());
        let q = &render_image_queries("dog", "four legs").unwrap()[0];
        let got = source.search(q, 2).unwrap();
        assert_eq!(got.len(), 2);
        assert_eq!(got[0].bytes, b"a.png");
        assert_eq!(got[1].bytes, b"b.png");
        let missing = &render_image_queries("cat", "fur").unwrap()[0];
        assert!(source.search(missing, 5).unwrap().is_empty());
    }

    #[test]
    fn http_source_fetches_listed_urls() {
        let (img_addr, img_handle) = serve(vec![
            ("image/png", b"first".to_vec()),
            ("image/png", b"second".to_vec()),
        ]);
        let listing = serde_json::json!({"results": [
            {"url": format!("{img_addr}/1.png")},
            {"url": format!("{img_addr}/2.png")},
            {"url": format!("{img_addr}/3.png")},
        ]});
        let (search_addr, search_handle) = serve(vec![("application/json", listing.to_string().into_bytes())]);
        let source = HttpImageSource::new(format!("{search_addr}/search?q={{query}}&n={{limit}}")).unwrap();
        let got = source.search("dog which has four legs", 2).unwrap();
        assert_eq!(got.len(), 2);
        assert_eq!(got[0].bytes, b"first");
        assert_eq!(got[1].image_ref, format!("{img_addr}/2.png"));
        let search_requests = search_handle.join().unwrap();
        assert!(search_requests[0].starts_with("GET /search?q=dog%20which%20has%20four%20legs&n=2 "));
        img_handle.join().unwrap();
    }

    #[test]
    fn http_template_needs_query() {
        assert!(HttpImageSource::new("http://localhost/search").is_err());
    }

    #[test]
    fn openai_compatible_request_shape() {
        let reply = serde_json::json!({"choices": [{"message": {"role": "assistant", "content": " fur\n- whiskers"}}]});
        let (addr, handle) = serve(vec![("application/json", reply.to_string().into_bytes())]);
        let source = OpenAiCompatibleSource::new(&format!("{addr}/v1/"), "test-model", Some("sekret".into())).unwrap();
        let prompt = render_rationale_query("cat").unwrap();
        assert_eq!(source.complete(&prompt).unwrap(), " fur\n- whiskers");
        let request = handle.join().unwrap().remove(0);
        assert!(request.starts_with("POST /v1/chat/completions "));
        assert!(request.to_ascii_lowercase().contains("authorization: bearer sekret"));
        let body: Value = serde_json::from_str(&request[request.find("\r\n\r\n").unwrap() + 4..]).unwrap();
        assert_eq!(body["model"], "test-model");
        assert_eq!(body["messages"][0]["content"], prompt);
    }
}
