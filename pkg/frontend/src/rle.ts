/**
 * Row-major run-length coding for binary masks: alternating run lengths
 * starting with the zero value, so a mask beginning with 1 gets a leading
 * zero-length run. Matches the annotation format the service decodes.
 */

export function encodeRle(mask: Uint8Array): number[] {
  const runs: number[] = [];
  let value = 0;
  let pos = 0;
  while (pos < mask.length) {
    let run = 0;
    while (pos < mask.length && mask[pos] === value) {
      run += 1;
      pos += 1;
    }
    runs.push(run);
    value = 1 - value;
  }
  return runs;
}

export function decodeRle(runs: number[], height: number, width: number): Uint8Array {
  let total = 0;
  for (const run of runs) {
    if (!Number.isInteger(run) || run < 0) {
      throw new Error(`invalid run length ${run}`);
    }
    total += run;
  }
  if (total !== height * width) {
    throw new Error(`run lengths sum to ${total}, expected ${height * width}`);
  }
  const mask = new Uint8Array(height * width);
  let pos = 0;
  let value = 0;
  for (const run of runs) {
    if (value) {
      mask.fill(1, pos, pos + run);
    }
    pos += run;
    value = 1 - value;
  }
  return mask;
}
