// Loads the payloads captured from the mock-backed session service.
// Raw text is kept alongside the parsed values so tests can assert
// rendered numbers appear verbatim in the API bytes.
import { readFileSync } from 'node:fs';
import { resolve } from 'node:path';

import type { ExplanationPayload, LogRecord, AgentResponse } from '../src/types.js';

// vitest runs from the package root, and under jsdom import.meta.url is
// an http URL, so resolve fixture paths against the working directory
function read(name: string): string {
  return readFileSync(resolve(process.cwd(), 'tests/fixtures', name), 'utf-8');
}

export interface TurnFixture {
  user_text: string;
  response: AgentResponse;
}

export const turnsRaw = read('turns.json');
export const turns: TurnFixture[] = JSON.parse(turnsRaw);

export const explanationRaw = read('explanation.json');
export const explanation: ExplanationPayload = JSON.parse(explanationRaw);

export const logRaw = read('session_log.jsonl');
export const logRecords: LogRecord[] = logRaw
  .split('\n')
  .filter((line) => line.length > 0)
  .map((line) => JSON.parse(line) as LogRecord);
