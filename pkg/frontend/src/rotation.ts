/** Rotation helpers for the pose controls.
 *
 * World frame matches the renderer: x right, y down, z forward. Yaw is a
 * rotation about +y, pitch about +x, roll about +z, composed yaw * pitch * roll
 * so roll is applied first. All matrices are row-major number[3][3].
 */

export type Mat3 = number[][];

const DEG = Math.PI / 180;

export function identity(): Mat3 {
  return [
    [1, 0, 0],
    [0, 1, 0],
    [0, 0, 1],
  ];
}

export function rotY(deg: number): Mat3 {
  const c = Math.cos(deg * DEG);
  const s = Math.sin(deg * DEG);
  return [
    [c, 0, s],
    [0, 1, 0],
    [-s, 0, c],
  ];
}

export function rotX(deg: number): Mat3 {
  const c = Math.cos(deg * DEG);
  const s = Math.sin(deg * DEG);
  return [
    [1, 0, 0],
    [0, c, -s],
    [0, s, c],
  ];
}

export function rotZ(deg: number): Mat3 {
  const c = Math.cos(deg * DEG);
  const s = Math.sin(deg * DEG);
  return [
    [c, -s, 0],
    [s, c, 0],
    [0, 0, 1],
  ];
}

export function matmul(a: Mat3, b: Mat3): Mat3 {
  const out: Mat3 = [
    [0, 0, 0],
    [0, 0, 0],
    [0, 0, 0],
  ];
  for (let i = 0; i < 3; i++) {
    for (let j = 0; j < 3; j++) {
      out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
    }
  }
  return out;
}

/** Euler degrees to a rotation matrix: R = Ry(yaw) Rx(pitch) Rz(roll). */
export function eulerToMatrix(yawDeg: number, pitchDeg: number, rollDeg: number): Mat3 {
  return matmul(rotY(yawDeg), matmul(rotX(pitchDeg), rotZ(rollDeg)));
}

/** Apply a world-frame Euler delta on top of an existing pose. */
export function applyDelta(base: Mat3, yawDeg: number, pitchDeg: number, rollDeg: number): Mat3 {
  return matmul(eulerToMatrix(yawDeg, pitchDeg, rollDeg), base);
}
