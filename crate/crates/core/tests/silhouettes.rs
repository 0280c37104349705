use std::path::Path;

use cmgan::maskgen::SilhouetteLibrary;

#[test]
fn shipped_silhouettes_match_the_builtin_library() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../assets/silhouettes");
    let shipped = SilhouetteLibrary::from_dir(&dir).unwrap();
    let builtin = SilhouetteLibrary::builtin();
    assert_eq!(shipped.len(), builtin.len());
    assert_eq!(shipped.shapes(), builtin.shapes());
}
