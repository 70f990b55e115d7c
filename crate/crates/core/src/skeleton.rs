//! 17-joint body layout (Human3.6M ordering) and limb groups.

pub const NUM_JOINTS: usize = 17;

pub const PELVIS: usize = 0;
pub const R_HIP: usize = 1;
pub const R_KNEE: usize = 2;
pub const R_ANKLE: usize = 3;
pub const L_HIP: usize = 4;
pub const L_KNEE: usize = 5;
pub const L_ANKLE: usize = 6;
pub const SPINE: usize = 7;
pub const THORAX: usize = 8;
pub const NECK: usize = 9;
pub const HEAD: usize = 10;
pub const L_SHOULDER: usize = 11;
pub const L_ELBOW: usize = 12;
pub const L_WRIST: usize = 13;
pub const R_SHOULDER: usize = 14;
pub const R_ELBOW: usize = 15;
pub const R_WRIST: usize = 16;

pub const JOINT_NAMES: [&str; NUM_JOINTS] = [
    "pelvis",
    "r_hip",
    "r_knee",
    "r_ankle",
    "l_hip",
    "l_knee",
    "l_ankle",
    "spine",
    "thorax",
    "neck",
    "head",
    "l_shoulder",
    "l_elbow",
    "l_wrist",
    "r_shoulder",
    "r_elbow",
    "r_wrist",
];

pub const RIGHT_LEG: [usize; 3] = [R_HIP, R_KNEE, R_ANKLE];
pub const LEFT_LEG: [usize; 3] = [L_HIP, L_KNEE, L_ANKLE];
pub const LEFT_ARM: [usize; 3] = [L_SHOULDER, L_ELBOW, L_WRIST];
pub const RIGHT_ARM: [usize; 3] = [R_SHOULDER, R_ELBOW, R_WRIST];
pub const LIMBS: [[usize; 3]; 4] = [LEFT_LEG, RIGHT_LEG, LEFT_ARM, RIGHT_ARM];
pub const TORSO: [usize; 5] = [PELVIS, SPINE, THORAX, NECK, HEAD];

/// Parent-child pairs for drawing.
pub const BONES: [(usize, usize); 16] = [
    (PELVIS, R_HIP),
    (R_HIP, R_KNEE),
    (R_KNEE, R_ANKLE),
    (PELVIS, L_HIP),
    (L_HIP, L_KNEE),
    (L_KNEE, L_ANKLE),
    (PELVIS, SPINE),
    (SPINE, THORAX),
    (THORAX, NECK),
    (NECK, HEAD),
    (THORAX, L_SHOULDER),
    (L_SHOULDER, L_ELBOW),
    (L_ELBOW, L_WRIST),
    (THORAX, R_SHOULDER),
    (R_SHOULDER, R_ELBOW),
    (R_ELBOW, R_WRIST),
];
