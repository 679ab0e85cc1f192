import { describe, expect, it } from 'vitest';

import { ApiError, ChatApi, ChatResponse } from '../src/api.js';
import { ChatController, alphaParam, initialState, validatePersonaForm } from '../src/state.js';

function fakeApi(overrides: Partial<Record<string, unknown>> = {}): ChatApi {
  let counter = 0;
  const api = Object.create(ChatApi.prototype) as ChatApi;
  Object.assign(api, {
    baseUrl: 'http://test',
    createSession: async (persona?: unknown) => ({
      session_id: `sid-${counter++}`,
      persona: persona ?? { gender: 'unspecified', location: 'ashvale', tags: [] },
    }),
    chat: async (_sid: string, message: string, alpha: number | 'auto'): Promise<ChatResponse> => ({
      response: `echo: ${message} [${alpha}]`,
      alpha_used: alpha === 'auto' ? 0.42 : alpha,
      alpha_source: alpha === 'auto' ? 'predicted' : 'fixed',
      history_len: 2,
    }),
    setPersona: async (_sid: string, persona: unknown) => ({ persona }),
    getSession: async (sid: string) => ({
      session_id: sid,
      persona: { gender: 'unspecified', location: 'ashvale', tags: [] },
      transcript: [],
    }),
    ...overrides,
  });
  return api;
}

describe('ChatController', () => {
  it('mirrors a successful exchange into the transcript', async () => {
    const c = new ChatController(fakeApi());
    await c.start();
    const resp = await c.send('hello');
    expect(resp?.response).toBe('echo: hello [auto]');
    expect(c.state.transcript).toHaveLength(2);
    expect(c.state.transcript[0]).toMatchObject({ role: 'user', text: 'hello' });
    expect(c.state.transcript[1]).toMatchObject({
      role: 'agent',
      alphaUsed: 0.42,
      alphaSource: 'predicted',
    });
  });

  it('uses the manual slider value when auto is off', async () => {
    const sent: unknown[] = [];
    const api = fakeApi({
      chat: async (_s: string, _m: string, alpha: unknown) => {
        sent.push(alpha);
        return { response: 'r', alpha_used: alpha, alpha_source: 'fixed', history_len: 2 };
      },
    });
    const c = new ChatController(api);
    await c.start();
    c.state.alpha = { mode: 'manual', value: 0.73 };
    await c.send('x');
    expect(sent).toEqual([0.73]);
    // displayed value comes from the server reply, never fabricated locally
    expect(c.state.transcript[1].alphaUsed).toBe(0.73);
  });

  it('keeps the transcript unchanged when the request fails', async () => {
    const api = fakeApi({
      chat: async () => {
        throw new ApiError(500, 'boom');
      },
    });
    const c = new ChatController(api);
    await c.start();
    await c.send('x');
    expect(c.state.transcript).toHaveLength(0);
    expect(c.state.error).toBe('boom');
    expect(c.state.sessionLost).toBe(false);
  });

  it('flags an evicted session but preserves the local transcript', async () => {
    let calls = 0;
    const api = fakeApi({
      chat: async (_s: string, message: string) => {
        calls += 1;
        if (calls > 1) throw new ApiError(404, 'unknown session');
        return { response: 'ok', alpha_used: 0.5, alpha_source: 'fixed', history_len: 2 };
      },
    });
    const c = new ChatController(api);
    await c.start();
    await c.send('first');
    await c.send('second');
    expect(c.state.sessionLost).toBe(true);
    expect(c.state.transcript).toHaveLength(2); // the first exchange survives
    expect(c.state.error).toContain('new session');
  });

  it('compare uses two forked sessions and leaves the transcript alone', async () => {
    const sessions: unknown[] = [];
    const chats: Array<[string, number | 'auto']> = [];
    const api = fakeApi({
      createSession: async (persona?: unknown) => {
        sessions.push(persona ?? null);
        return { session_id: `fork-${sessions.length}`, persona: persona ?? {} };
      },
      chat: async (sid: string, _m: string, alpha: number | 'auto') => {
        chats.push([sid, alpha]);
        return {
          response: `pane ${alpha}`,
          alpha_used: alpha as number,
          alpha_source: 'fixed',
          history_len: 2,
        };
      },
    });
    const c = new ChatController(api);
    await c.start();
    const before = c.state.transcript.length;
    const panes = await c.compare('same question');
    expect(panes).not.toBeNull();
    expect(panes![0]).toMatchObject({ alpha: 0, response: 'pane 0' });
    expect(panes![1]).toMatchObject({ alpha: 1, response: 'pane 1' });
    expect(c.state.transcript).toHaveLength(before);
    const forked = chats.map(([sid]) => sid);
    expect(new Set(forked).size).toBe(2); // two distinct sessions
    expect(forked).not.toContain(c.state.sessionId);
  });

  it('persona form validation blocks bad input before any request', async () => {
    const calls: unknown[] = [];
    const api = fakeApi({
      setPersona: async (_s: string, persona: unknown) => {
        calls.push(persona);
        return { persona };
      },
    });
    const c = new ChatController(api);
    await c.start();
    const ok = await c.updatePersona({ gender: 'alien', location: 'x', tags: [] });
    expect(ok).toBe(false);
    expect(calls).toHaveLength(0);
    expect(c.state.error).toContain('gender');
  });

  it('empty tag lists are allowed', () => {
    expect(validatePersonaForm({ gender: 'female', location: 'ashvale', tags: [] })).toBeNull();
  });

  it('alphaParam reflects the control mode', () => {
    const s = initialState();
    expect(alphaParam(s)).toBe('auto');
    s.alpha = { mode: 'manual', value: 1 };
    expect(alphaParam(s)).toBe(1);
  });
});
