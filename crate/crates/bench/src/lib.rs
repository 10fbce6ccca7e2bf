//! Fixtures shared by the benchmarks.

use tkd_core::pipeline::Student;
use tkd_core::sim::{generate_stream, SceneSpec, Stream, StreamConfig};

/// A pretrained student and a short shifted-appearance stream from the same
/// world.
pub fn student_and_stream(frames: usize) -> (Student, Stream) {
    let world = StreamConfig {
        n_frames: frames,
        seed: 1,
        ..StreamConfig::default()
    };
    let student = Student::pretrain(&world, &Default::default()).expect("pretraining");
    let scene = SceneSpec {
        appearance_shift: 1.0,
        duration_range: [frames, frames],
        ..SceneSpec::default()
    };
    let stream = generate_stream(&[scene], &world).expect("stream");
    (student, stream)
}
