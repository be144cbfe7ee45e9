use std::io::Write;
use std::net::{TcpListener, TcpStream};
use std::time::Duration;

use edgegrasp::codec::{CodecConfig, CodecModel, Latent};
use edgegrasp::grasp::{CandidateRecord, DetectorConfig, DetectorModel};
use edgegrasp::net::{
    exchange, frame_decode, frame_encode, request_grasp, ClientConfig, ClientError, CloudModels, Server, ServerConfig, ServerHandle,
    Status, CRC_LEN, HEADER_LEN,
};
use edgegrasp::synth;
use edgegrasp_tensor::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn models(seed: u64) -> (CodecModel, DetectorModel) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let codec = CodecModel::new(CodecConfig::default(), &mut rng).unwrap();
    let det = DetectorModel::new(DetectorConfig::default(), &mut rng).unwrap();
    (codec, det)
}

fn start(codec: &CodecModel, det: &DetectorModel, config: ServerConfig) -> ServerHandle {
    let cloud = CloudModels::new(codec.clone(), det.clone()).unwrap();
    Server::bind("127.0.0.1:0", cloud, config).unwrap().spawn().unwrap()
}

fn image() -> Tensor {
    synth::grasp_scenes(1, 4).remove(0).image
}

fn quick() -> ClientConfig {
    ClientConfig {
        timeout: Duration::from_secs(20),
    }
}

#[test]
fn loopback_matches_in_process_bitwise() {
    let (codec, det) = models(1);
    let server = start(&codec, &det, ServerConfig::default());
    let img = image();
    let reply = request_grasp(server.addr(), &codec, &img, &quick()).unwrap();
    assert_eq!(reply.response.status, Status::Ok);
    assert_eq!(reply.frame_bytes, HEADER_LEN + 8 * 52 * 37 * 4 + CRC_LEN);
    assert_eq!(reply.sent_bytes, reply.frame_bytes + 4);
    assert!(reply.response.decode_ms >= 0.0 && reply.response.detect_ms >= 0.0);

    let local: Vec<CandidateRecord> = det
        .detect(&codec.decode(&codec.encode(&img).unwrap()).unwrap())
        .unwrap()
        .iter()
        .map(CandidateRecord::from)
        .collect();
    assert_eq!(reply.response.candidates.len(), local.len());
    for (a, b) in reply.response.candidates.iter().zip(&local) {
        for (p, q) in [(a.x, b.x), (a.y, b.y), (a.w, b.w), (a.h, b.h), (a.theta_deg, b.theta_deg), (a.confidence, b.confidence)] {
            assert_eq!(p.to_bits(), q.to_bits());
        }
        assert_eq!(a.bin, b.bin);
    }
    server.shutdown();
}

#[test]
fn foreign_encoder_is_refused_as_unknown_model() {
    let (codec, det) = models(2);
    let (other, _) = models(3);
    let server = start(&codec, &det, ServerConfig::default());
    let err = request_grasp(server.addr(), &other, &image(), &quick()).unwrap_err();
    assert!(matches!(err, ClientError::Status { status: Status::UnknownModel, .. }), "{err}");
    assert!(!err.is_transport());
}

#[test]
fn malformed_sessions_do_not_disturb_later_ones() {
    let (codec, det) = models(4);
    let server = start(
        &codec,
        &det,
        ServerConfig {
            max_frame_bytes: 100_000,
            io_timeout: Duration::from_millis(500),
        },
    );
    let garbage = exchange(server.addr(), b"definitely not a frame", &quick()).unwrap();
    assert_eq!(garbage.status, Status::BadFrame);

    let mut corrupt = frame_encode(&codec.encode(&image()).unwrap()).unwrap();
    corrupt[40] ^= 0x10;
    assert_eq!(exchange(server.addr(), &corrupt, &quick()).unwrap().status, Status::BadFrame);

    let mut huge = TcpStream::connect(server.addr()).unwrap();
    huge.write_all(&(1u32 << 30).to_le_bytes()).unwrap();
    let wrong_shape = Latent {
        tensor: Tensor::zeros(vec![2, 5, 5]),
        model_id: codec.model_id(),
    };
    assert_eq!(
        exchange(server.addr(), &frame_encode(&wrong_shape).unwrap(), &quick()).unwrap().status,
        Status::InvalidLatent
    );

    // Declares more than it sends, then goes quiet.
    let mut truncated = TcpStream::connect(server.addr()).unwrap();
    truncated.write_all(&1000u32.to_le_bytes()).unwrap();
    truncated.write_all(&[7u8; 10]).unwrap();

    let ok = request_grasp(server.addr(), &codec, &image(), &quick()).unwrap();
    assert_eq!(ok.response.status, Status::Ok);
    drop((huge, truncated));
}

#[test]
fn oversized_declaration_is_rejected_before_reading() {
    let (codec, det) = models(5);
    let server = start(
        &codec,
        &det,
        ServerConfig {
            max_frame_bytes: 1000,
            ..ServerConfig::default()
        },
    );
    let frame = frame_encode(&codec.encode(&image()).unwrap()).unwrap();
    assert_eq!(exchange(server.addr(), &frame, &quick()).unwrap().status, Status::FrameTooLarge);
}

#[test]
fn transport_failures_are_distinct_from_status_errors() {
    let (codec, _) = models(6);
    let closed = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = closed.local_addr().unwrap();
    drop(closed);
    let err = request_grasp(addr, &codec, &image(), &quick()).unwrap_err();
    assert!(matches!(err, ClientError::Connect { .. }), "{err}");
    assert!(err.is_transport());

    let silent = TcpListener::bind("127.0.0.1:0").unwrap();
    let cfg = ClientConfig {
        timeout: Duration::from_millis(200),
    };
    let err = request_grasp(silent.local_addr().unwrap(), &codec, &image(), &cfg).unwrap_err();
    assert!(matches!(err, ClientError::Timeout(_)), "{err}");
    assert!(err.is_transport());
}

proptest! {
    #[test]
    fn frames_round_trip_bitwise(
        c in 1usize..5, h in 1usize..9, w in 1usize..9,
        id in any::<u64>(),
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensor = Tensor::randn(vec![c, h, w], 3.0, &mut rng);
        let latent = Latent { tensor, model_id: id };
        let bytes = frame_encode(&latent).unwrap();
        prop_assert_eq!(bytes.len(), HEADER_LEN + c * h * w * 4 + CRC_LEN);
        let back = frame_decode(&bytes).unwrap();
        prop_assert_eq!(back.model_id, id);
        prop_assert_eq!(back.tensor.shape(), latent.tensor.shape());
        for (a, b) in back.tensor.data().iter().zip(latent.tensor.data()) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn single_byte_corruption_never_decodes(pos in 0usize..1000, flip in 1u8..=255) {
        let latent = Latent {
            tensor: Tensor::full(vec![2, 5, 6], 0.5),
            model_id: 99,
        };
        let mut bytes = frame_encode(&latent).unwrap();
        let at = pos % bytes.len();
        bytes[at] ^= flip;
        prop_assert!(frame_decode(&bytes).is_err());
    }
}
