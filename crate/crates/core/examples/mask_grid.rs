//! Renders the attention mask of each regime for one sequence layout.

use invic::masking::{stage_mask, BottleneckMode, MaskKind, SegmentLayout};

fn main() -> invic::Result<()> {
    // Two visual tokens, three question tokens (one padding), two cues and
    // a two-token answer.
    let layout = SegmentLayout::new(2, 3, 2, 2).with_padding(1, 0)?;
    for (name, kind) in [
        ("causal", MaskKind::Causal),
        ("bottleneck, prose", MaskKind::Bottleneck(BottleneckMode::Prose)),
        ("bottleneck, strict", MaskKind::Bottleneck(BottleneckMode::Strict)),
    ] {
        let m = stage_mask(&layout, kind)?;
        println!("{name} ({} blocked)\n{}", m.blocked_count(), m.render(&layout));
    }
    Ok(())
}
