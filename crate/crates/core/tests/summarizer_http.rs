use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::thread;

use invmix_core::synthesis::{external_suffix_provider, HttpSummarizer, Provenance, Summarizer};

/// Serves one request with `status` and `body`; returns the endpoint URL and
/// a handle yielding the request body it received.
fn stub(status: &'static str, body: &'static str) -> (String, thread::JoinHandle<String>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/summarize", listener.local_addr().unwrap());
    let handle = thread::spawn(move || {
        let (stream, _) = listener.accept().unwrap();
        let mut reader = BufReader::new(stream.try_clone().unwrap());
        let mut len = 0;
        loop {
            let mut line = String::new();
            reader.read_line(&mut line).unwrap();
            if line.trim().is_empty() {
                break;
            }
            if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                len = v.trim().parse().unwrap();
            }
        }
        let mut req = vec![0; len];
        reader.read_exact(&mut req).unwrap();
        let mut stream = stream;
        write!(
            stream,
            "HTTP/1.1 {status}\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
            body.len()
        )
        .unwrap();
        String::from_utf8(req).unwrap()
    });
    (url, handle)
}

fn captions() -> Vec<String> {
    vec!["a glyph on a striped background".into(), "a glyph in the dark".into()]
}

#[test]
fn phrases_from_the_service() {
    let (url, h) = stub(
        "200 OK",
        r#"{"phrases": ["a photo of a glyph on stripes", "a photo of a glyph in the dark"]}"#,
    );
    let v = external_suffix_provider(&HttpSummarizer::new(url), &captions(), "glyph", 8, None).unwrap();
    let sent: serde_json::Value = serde_json::from_str(&h.join().unwrap()).unwrap();
    assert_eq!(sent["captions"].as_array().unwrap().len(), 2);
    assert_eq!(v.provenance, Provenance::External);
    let texts: Vec<&str> = v.phrases.iter().map(|p| p.text.as_str()).collect();
    assert_eq!(texts, ["on stripes", "in the dark"]);
}

#[test]
fn server_error_falls_back() {
    let (url, h) = stub("500 Internal Server Error", "{}");
    let tags = vec!["plain".to_string(), "noisy".to_string()];
    let v = external_suffix_provider(&HttpSummarizer::new(url.clone()), &captions(), "glyph", 8, Some(&tags)).unwrap();
    h.join().unwrap();
    assert_eq!(v.provenance, Provenance::Static);
    assert_eq!(v.phrases.len(), 2);

    let (url, h) = stub("500 Internal Server Error", "{}");
    let err = HttpSummarizer::new(url).summarize(&captions()).unwrap_err();
    h.join().unwrap();
    assert_eq!(err.kind(), "service");
}

#[test]
fn malformed_body_is_a_parse_error() {
    let (url, h) = stub("200 OK", r#"{"phrases": ["something else entirely"]}"#);
    let err = external_suffix_provider(&HttpSummarizer::new(url), &captions(), "glyph", 8, None).unwrap_err();
    h.join().unwrap();
    assert_eq!(err.kind(), "parse");
}
